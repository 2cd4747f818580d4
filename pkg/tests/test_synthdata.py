import numpy as np
import pytest

from mmkd import synthdata as sd
from mmkd.errors import ConfigError, ContractError
from mmkd.rng import derive_seed

SMALL = dict(num_train=24, num_val=12, holdout_size=8)


def cfg(**kw):
    return sd.DatasetConfig(**{**SMALL, **kw})


def example(seed=3, **kw):
    return sd.generate_example(seed, cfg(), **kw)


class TestExample:
    def test_shapes_and_ranges(self):
        c = cfg()
        ex = example()
        assert ex.appearance.shape == (c.frames, 3, c.height, c.width)
        assert ex.flow.shape == (c.frames, 2, c.height, c.width)
        assert ex.spectro.shape == (c.frames, 1, c.spectro_bins, c.spectro_bins)
        assert len(ex.layout) == c.frames
        assert ex.appearance.dtype == np.float32
        assert 0.0 <= ex.appearance.min() and ex.appearance.max() <= 1.0
        assert 0.0 <= ex.spectro.min() and ex.spectro.max() <= 1.0
        assert ex.action_label == ex.noun_label * c.num_verbs + ex.verb_label

    def test_deterministic(self):
        a, b = example(11), example(11)
        for name in ("appearance", "flow", "spectro"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
        assert a.layout == b.layout

    def test_seed_changes_clip(self):
        assert example(1).appearance.tobytes() != example(2).appearance.tobytes()

    def test_forced_labels(self):
        ex = example(noun=2, verb=3)
        assert (ex.noun_label, ex.verb_label) == (2, 3)

    @pytest.mark.parametrize("seed", range(5))
    def test_flow_vanishes_outside_boxes(self, seed):
        c = cfg()
        ex = example(seed)
        for t in range(c.frames):
            inside = np.zeros((c.height, c.width), bool)
            for b in ex.layout[t]:
                x0, y0 = int(np.floor(b.x)), int(np.floor(b.y))
                x1, y1 = int(np.ceil(b.x + b.w)), int(np.ceil(b.y + b.h))
                inside[max(y0 - 1, 0):y1 + 1, max(x0 - 1, 0):x1 + 1] = True
            assert np.all(ex.flow[t][:, ~inside] == 0)

    @pytest.mark.parametrize("verb,axis,sign", [(0, 0, -1), (1, 0, 1), (2, 1, -1)])
    def test_translation_flow_direction(self, verb, axis, sign):
        ex = example(5, noun=0, verb=verb)
        f = ex.flow[:, axis]
        moving = f[f != 0]
        assert moving.size and np.sign(moving.mean()) == sign

    def test_grow_flow_points_outward(self):
        ex = example(6, noun=1, verb=3)
        box = [b for b in ex.layout[4] if b.category != 0][0]
        cx = box.x + box.w / 2
        xs = np.arange(ex.flow.shape[-1]) + 0.5
        fx = ex.flow[4, 0]
        right, left = fx[:, xs > cx + 1], fx[:, xs < cx - 1]
        assert right[right != 0].mean() > 0 > left[left != 0].mean()


class TestSplits:
    def test_compositional_holds_out_nouns(self):
        c = cfg(split_mode="compositional", num_train=64, num_val=32, holdout_size=16)
        train, hold, val = sd.build_splits(c)
        assert {e.noun_label for e in train} <= set(c.train_nouns)
        assert {e.noun_label for e in hold} <= set(c.train_nouns)
        assert {e.noun_label for e in val} <= set(c.holdout_nouns)
        assert not set(c.train_nouns) & set(c.holdout_nouns)

    def test_sizes_and_disjoint_ids(self):
        c = cfg()
        train, hold, val = sd.build_splits(c)
        assert (len(train), len(hold), len(val)) == (16, 8, 12)
        ids = train.ids + hold.ids + val.ids
        assert len(set(ids)) == len(ids)

    def test_cooccurrence_one_ties_verb_to_noun(self):
        c = cfg(split_mode="compositional", verb_cooccurrence=1.0, num_train=40, holdout_size=8)
        train = sd.build_split(c, "train")
        assert all(e.verb_label == e.noun_label % c.num_verbs for e in train)

    def test_label_noise_rate(self):
        c = cfg(label_noise=0.4)
        flips = 0
        n = 300
        for i in range(n):
            seed = derive_seed(99, i)
            _, _, v = sd.example_object_track(seed, c)
            flips += sd.generate_example(seed, c).verb_label != v
        # a redrawn label equals the truth a quarter of the time
        assert abs(flips / n - 0.4 * 0.75) < 0.08

    @pytest.mark.parametrize("kw", [
        {"holdout_size": 24}, {"split_mode": "random"}, {"holdout_nouns": (0, 1, 2, 3, 4, 5), "split_mode": "compositional"},
        {"label_noise": 1.5}, {"num_nouns": 1}, {"window": 20},
    ])
    def test_invalid_configs(self, kw):
        with pytest.raises(ConfigError):
            cfg(**kw)

    def test_presets(self):
        assert sd.preset("compositional").split_mode == "compositional"
        assert sd.preset("weak-spectro").spectro_noise > sd.DatasetConfig().spectro_noise
        with pytest.raises(ConfigError):
            sd.preset("nope")


class TestShards:
    def test_round_trip(self, tmp_path):
        shard = sd.build_split(cfg(), "val")
        path = tmp_path / "val.shard"
        sd.write_shard(shard, path)
        back = sd.read_shard(path)
        assert back.header == shard.header
        for a, b in zip(shard, back):
            assert a.appearance.tobytes() == b.appearance.tobytes()
            assert a.flow.tobytes() == b.flow.tobytes()
            assert a.layout == b.layout
            assert (a.noun_label, a.verb_label, a.action_label) == (b.noun_label, b.verb_label, b.action_label)

    def test_encoding_is_byte_stable(self):
        assert sd.encode_shard(sd.build_split(cfg(), "holdout")) == sd.encode_shard(sd.build_split(cfg(), "holdout"))

    def test_bad_magic(self):
        raw = sd.encode_shard(sd.build_split(cfg(), "holdout"))
        with pytest.raises(Exception):
            sd.decode_shard(b"XXXXXXXX" + raw[8:])


class TestViews:
    def test_eval_view_is_central_window(self):
        c = cfg()
        v = sd.sample_view(0, "eval", c)
        assert v.frame_indices == tuple(range(2, 10)) and not v.hflip

    def test_train_view_bounds(self):
        c = cfg(hflip=True)
        for s in range(30):
            v = sd.sample_view(s, "train", c)
            assert v.crop_x + v.crop_size <= c.width and v.crop_size >= 24
            assert len(v.frame_indices) == c.window

    def test_flip_off_by_default(self):
        assert not any(sd.sample_view(s, "train", cfg()).hflip for s in range(30))

    def test_identity_view_is_noop(self):
        c = cfg()
        ex = example()
        out = sd.apply_view(ex, sd.identity_view(c))
        assert out.appearance.tobytes() == ex.appearance.tobytes()
        assert out.flow.tobytes() == ex.flow.tobytes()

    def test_flip_negates_horizontal_flow(self):
        c = cfg()
        ex = example(noun=0, verb=1)
        v = sd.ViewParams(0, 0, 32, True, 0, tuple(range(c.frames)))
        out = sd.apply_view(ex, v)
        np.testing.assert_array_equal(out.flow[:, 0], -ex.flow[:, 0, :, ::-1])
        np.testing.assert_array_equal(out.appearance, ex.appearance[..., ::-1])

    def test_layout_follows_flip(self):
        c = cfg()
        ex = example()
        v = sd.ViewParams(0, 0, 32, True, 0, tuple(range(c.frames)))
        a, b = ex.layout[0][0], sd.view_layout(ex.layout, v, 32, 32)[0][0]
        assert b.x == pytest.approx(32 - a.x - a.w, abs=1e-5)

    def test_bad_view(self):
        with pytest.raises(ContractError):
            sd.apply_view(example(), sd.ViewParams(0, 0, 40, False, 0, (0, 1)))
        with pytest.raises(ContractError):
            sd.sample_view(0, "test", cfg())


def test_rasterized_layout_shape():
    ex = example()
    r = sd.rasterize_layout(ex.layout, 32, 32)
    assert r.shape == (12, 3, 32, 32) and r.min() < 1.0


def test_label_marginals_are_uniform():
    c = sd.DatasetConfig(num_train=24, num_val=12, holdout_size=8, frames=4, window=4)
    nouns, verbs = np.zeros(c.num_nouns), np.zeros(c.num_verbs)
    for i in range(1000):
        _, n, v = sd.example_object_track(derive_seed(5, i), c)
        nouns[n] += 1
        verbs[v] += 1
    assert np.abs(nouns / 1000 - 1 / c.num_nouns).max() < 0.05
    assert np.abs(verbs / 1000 - 1 / c.num_verbs).max() < 0.05


def test_flip_frequency_when_enabled():
    c = cfg(hflip=True)
    flips = sum(sd.sample_view(s, "train", c).hflip for s in range(10_000))
    assert abs(flips / 10_000 - 0.5) < 0.02


def test_translation_flow_is_one_constant_displacement():
    ex = example(8, noun=2, verb=1)
    fx = ex.flow[:, 0]
    assert len(np.unique(fx[fx != 0])) == 1
    assert np.all(ex.flow[:, 1] == 0)


def test_double_flip_is_identity():
    c = cfg()
    ex = example(9)
    v = sd.ViewParams(0, 0, 32, True, 0, tuple(range(c.frames)))
    back = sd.apply_view(sd.apply_view(ex, v), v)
    assert back.appearance.tobytes() == ex.appearance.tobytes()
    assert back.flow.tobytes() == ex.flow.tobytes()


def test_empty_layout_is_white():
    assert np.all(sd.rasterize_layout([[]], 16, 16) == 1.0)
