import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.detect.env import (
    ETA, MIN_EXTENT, Action, BoundingVolume, EncoderConfig, apply_action, best_dice, centred_box, dice, embed,
    inference_boxes, label_patch, patch_accuracy, resample_box, sample_patches, step_reward, train_patch_encoder,
    transition_reward,
)
from artifact.phantom import PhantomConfig, generate_dataset
from helpers import brute_dice

BIG = (64, 64, 64)


def boxes(lattice=(12, 10, 8)):
    def build(vals):
        lo, ext = vals[:3], vals[3:]
        lo = [min(a, n - 1) for a, n in zip(lo, lattice)]
        hi = [min(a + e, n) for a, e, n in zip(lo, ext, lattice)]
        return BoundingVolume(*lo, *hi)

    return st.tuples(*[st.integers(0, n - 1) for n in lattice], *[st.integers(1, n) for n in lattice]).map(build)


class TestDice:
    def test_examples(self):
        a = BoundingVolume(0, 0, 0, 10, 10, 10)
        assert dice(a, a) == 1.0
        assert dice(a, BoundingVolume(10, 0, 0, 20, 10, 10)) == 0.0
        assert dice(a, BoundingVolume(5, 0, 0, 15, 10, 10)) == 0.5

    def test_both_empty(self):
        z = np.zeros((3, 3, 3), bool)
        assert dice(z, z) == 0.0

    def test_lattice_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.ones((2, 2, 2), bool), np.ones((3, 2, 2), bool))

    @settings(max_examples=200, deadline=None)
    @given(boxes(), boxes())
    def test_matches_voxel_count(self, a, b):
        lat = (12, 10, 8)
        ra, rb = a.rasterize(lat), b.rasterize(lat)
        oracle = brute_dice(ra, rb)
        assert dice(a, b) == oracle
        assert dice(a, rb) == oracle and dice(ra, b) == oracle and dice(ra, rb) == oracle
        assert dice(b, a) == dice(a, b)
        assert (dice(a, b) == 1.0) == (a == b)
        assert (dice(a, b) == 0.0) == (not (ra & rb).any())


class TestActions:
    def test_translate_third(self):
        assert apply_action(BoundingVolume(0, 0, 0, 30, 30, 30), Action.LX_POS, BIG) == (10, 0, 0, 40, 30, 30)

    def test_shrink_sixth(self):
        assert apply_action(BoundingVolume(10, 10, 10, 40, 40, 40), Action.S_NEG, BIG) == (15, 15, 15, 35, 35, 35)

    def test_grow_sixth(self):
        assert apply_action(BoundingVolume(10, 10, 10, 40, 40, 40), Action.S_POS, BIG) == (5, 5, 5, 45, 45, 45)

    def test_clamped_at_edge(self):
        b = apply_action(BoundingVolume(40, 0, 0, 64, 30, 30), Action.LX_POS, BIG)
        assert b.x1 <= 64 and b.valid(BIG)

    def test_trigger_rejected(self):
        with pytest.raises(ValueError):
            apply_action(BoundingVolume(0, 0, 0, 8, 8, 8), Action.TRIGGER, BIG)

    def test_nine_actions(self):
        assert len(Action) == 9 and Action.TRIGGER == 8

    @settings(max_examples=200, deadline=None)
    @given(boxes((20, 18, 16)), st.sampled_from(list(Action)[:8]))
    def test_result_valid(self, b, a):
        lat = (20, 18, 16)
        out = apply_action(b, a, lat)
        assert out.valid(lat)
        assert all(min(MIN_EXTENT, n) <= e for e, n in zip(out.extent, lat))

    @settings(max_examples=200, deadline=None)
    @given(boxes((40, 40, 40)), st.integers(0, 2))
    def test_inverse_translation(self, b, axis):
        lat = (40, 40, 40)
        fwd, back = Action(2 * axis), Action(2 * axis + 1)
        moved = apply_action(b, fwd, lat)
        step = b.extent[axis] // 3
        unclamped = b.hi[axis] + step <= lat[axis] and min(b.extent) >= MIN_EXTENT
        if unclamped:
            assert apply_action(moved, back, lat) == b

    def test_inference_boxes(self):
        lat = (32, 32, 16)
        bs = inference_boxes(lat)
        assert len(bs) == 13 and len(set(bs)) == 13
        assert bs[0] == centred_box(lat)
        assert all(b.valid(lat) for b in bs)
        assert bs[0].extent == (24, 24, 12)


class TestReward:
    def test_examples(self):
        assert step_reward(0.1, Action.LX_POS, 0.3) == 1
        assert step_reward(0.3, Action.LX_POS, 0.1) == -1
        assert step_reward(0.3, Action.S_POS, 0.3) == 0
        assert step_reward(0.0, Action.TRIGGER, 0.25) == ETA == 10
        assert step_reward(0.5, Action.TRIGGER, 0.1) == -10

    def test_threshold_boundary(self):
        assert step_reward(0.0, Action.TRIGGER, 0.2) == 10
        assert step_reward(0.0, Action.TRIGGER, 0.19999) == -10

    def test_max_matching_lesion(self):
        lat = (20, 20, 20)
        m1 = BoundingVolume(0, 0, 0, 5, 5, 5).rasterize(lat)
        m2 = BoundingVolume(10, 10, 10, 16, 16, 16).rasterize(lat)
        box = BoundingVolume(10, 10, 10, 16, 16, 16)
        assert best_dice(box, [m1, m2]) == 1.0
        nxt, r = transition_reward(box, Action.LX_POS, [m1, m2], lat)
        assert nxt == (12, 10, 10, 18, 16, 16) and r == -1

    def test_grow_from_inside(self):
        # a box inside a lesion: repeated growth raises Dice until it overshoots, then lowers it
        lat = (40, 40, 40)
        lesion = BoundingVolume(10, 10, 10, 30, 30, 30).rasterize(lat)
        b = BoundingVolume(16, 16, 16, 24, 24, 24)
        ds = [dice(b, lesion)]
        for _ in range(6):
            b = apply_action(b, Action.S_POS, lat)
            ds.append(dice(b, lesion))
        peak = int(np.argmax(ds))
        assert 0 < peak < len(ds) - 1
        assert all(x < y for x, y in zip(ds[:peak], ds[1:peak + 1]))
        assert ds[-1] < ds[peak]


@pytest.fixture(scope="module")
def encoder_and_data():
    train = generate_dataset(20, seed=11)
    enc, acc = train_patch_encoder(train, EncoderConfig(), seed=0)
    return enc, acc


class TestEncoder:
    def test_label_patch(self):
        lat = (20, 20, 20)
        m = BoundingVolume(0, 0, 0, 10, 10, 10).rasterize(lat)
        # Dice 0.7: box of 10x10x7 inside the 10^3 lesion -> 2*700/1700
        assert dice(BoundingVolume(0, 0, 0, 10, 10, 7), m) == pytest.approx(2 * 700 / 1700)
        assert label_patch(BoundingVolume(0, 0, 0, 10, 10, 7), [m]) == 1
        assert label_patch(BoundingVolume(12, 12, 12, 18, 18, 18), [m]) == 0

    def test_no_positive_rejected(self):
        clean = generate_dataset(2, PhantomConfig(lesion_count=0), seed=0)
        with pytest.raises(ValueError, match="lesion"):
            train_patch_encoder(clean, EncoderConfig(positives=10, negatives=10, epochs=1))

    def test_heldout_accuracy(self, encoder_and_data):
        enc, _ = encoder_and_data
        held = generate_dataset(10, seed=12)
        pos, neg = sample_patches(held, 200, 200, np.random.default_rng(5))
        items = [(s, b, 1) for s, b in pos] + [(s, b, 0) for s, b in neg]
        x = np.stack([resample_box(s.volume, b, enc.input_extent) for s, b, _ in items])[:, None]
        y = np.array([lab for *_, lab in items])
        assert patch_accuracy(enc, x, y) > 0.9

    def test_embedding(self, encoder_and_data):
        enc, _ = encoder_and_data
        vol = generate_dataset(1, seed=1)[0].volume
        box = BoundingVolume(2, 3, 1, 20, 21, 12)
        a, b = embed(vol, box, enc), embed(vol, box, enc)
        assert np.array_equal(a.embedding, b.embedding) and a.box == box
        assert a.embedding.shape == (enc.embedding_dim,)
        z = embed(np.zeros_like(vol), box, enc)
        assert np.all(np.isfinite(z.embedding))

    def test_degenerate_box_rejected(self, encoder_and_data):
        enc, _ = encoder_and_data
        vol = np.zeros((32, 32, 16), np.float32)
        with pytest.raises(ValueError):
            embed(vol, BoundingVolume(0, 0, 0, 2, 10, 10), enc)
