import numpy as np

from radar.grids import (REGION_INTERIOR, layout_from_schedule, make_schedule,
                         raster_layout, schedule_subset)
from radar.masks import (NestedMask, block_causal_reference, build_nested_mask,
                         check_mask)


def small_layout():
    s = make_schedule(2, 2, "center", 1, initial=(1, 1))
    return layout_from_schedule(s)


class TestBuildNestedMask:
    def test_hand_oracle_two_step(self):
        # Schedule [1x1, 2x2], prefix 1: six positions.  Rules worked out by
        # hand: prefix sees itself; the step-1 token sees prefix and itself;
        # the step-2 interior (the center slot) sees prefix, step 1 and
        # itself; the three step-2 border slots see everything.
        mask = build_nested_mask(small_layout(), prefix_len=1)
        expected = np.array([
            [1, 0, 0, 0, 0, 0],
            [1, 1, 0, 0, 0, 0],
            [1, 1, 1, 0, 0, 0],
            [1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1],
        ], dtype=bool)
        assert np.array_equal(mask.dense(), expected)
        assert mask.n == 6

    def test_single_step_fully_bidirectional(self):
        s = schedule_subset(make_schedule(4, 4, "center", 1), {1})
        mask = build_nested_mask(layout_from_schedule(s), prefix_len=1)
        dense = mask.dense()
        assert dense[1:, :].all()  # every query sees prefix and whole step
        assert dense[0, 0] and not dense[0, 1:].any()

    def test_interior_restriction_off_is_block_causal(self):
        for h, w in ((4, 4), (6, 5)):
            lay = layout_from_schedule(make_schedule(h, w, "center", 1))
            mask = build_nested_mask(lay, 1, interior_restriction=False)
            assert np.array_equal(mask.dense(), block_causal_reference(lay, 1))

    def test_diagonal_always_allowed(self):
        lay = layout_from_schedule(make_schedule(6, 6, "corner:top_left", 1))
        assert np.diagonal(build_nested_mask(lay, 1).dense()).all()

    def test_no_future_leak(self):
        for anchor in ("center", "edge:right", "corner:bottom_left"):
            lay = layout_from_schedule(make_schedule(8, 8, anchor, 1))
            mask = build_nested_mask(lay, 1)
            steps = np.concatenate([[0], lay.steps])
            future = steps[None, :] > steps[:, None]
            assert not (mask.dense() & future).any()

    def test_border_rows_open_through_own_step(self):
        # Mask-side precondition of cache/full equivalence: border queries
        # have no forbidden key at or before their own step.
        lay = layout_from_schedule(make_schedule(8, 8, "center", 1))
        mask = build_nested_mask(lay, 1).dense()
        steps = np.concatenate([[0], lay.steps])
        border = np.concatenate([[False], lay.region != REGION_INTERIOR])
        for q in np.flatnonzero(border):
            past = steps <= steps[q]
            assert mask[q, past].all()

    def test_monotone_context_across_steps(self):
        lay = layout_from_schedule(make_schedule(6, 6, "center", 1))
        mask = build_nested_mask(lay, 1).dense()
        coords = {}
        for i, (r, c, k) in enumerate(zip(lay.rows, lay.cols, lay.steps)):
            coords.setdefault((r, c), []).append((k, i + 1))
        for occurrences in coords.values():
            occurrences.sort()
            for (k1, q1), (k2, q2) in zip(occurrences, occurrences[1:]):
                assert k1 < k2
                visible1 = set(np.flatnonzero(mask[q1]))
                visible2 = set(np.flatnonzero(mask[q2]))
                assert visible1 <= visible2

    def test_raster_layout_gives_plain_causal(self):
        lay = raster_layout(3, 3)
        mask = build_nested_mask(lay, 1).dense()
        assert np.array_equal(mask, np.tril(np.ones((10, 10), dtype=bool)))

    def test_prefix_len_zero(self):
        mask = build_nested_mask(small_layout(), prefix_len=0)
        assert mask.n == 5
        assert check_mask(mask).ok

    def test_large_layout_streams_rows(self):
        lay = layout_from_schedule(make_schedule(40, 40, "center", 1))
        mask = build_nested_mask(lay, 1)
        assert mask.allowed is None and mask.n > 4096
        rows = mask.rows(0, 3)
        assert rows.shape == (3, mask.n)
        assert rows[0, 0] and not rows[0, 1:].any()
        # spot-check against the rule set at a step boundary
        q = 1 + lay.segments[1].start  # first position of step 2
        row = mask.rows(q, q + 1)[0]
        assert row[: 1 + lay.segments[1].start].all()


class TestCheckMask:
    def test_agrees_with_builder_many_layouts(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            h, w = rng.integers(1, 7, size=2)
            anchor = ("center", "edge:top", "corner:top_left")[rng.integers(0, 3)]
            s = make_schedule(int(h), int(w), anchor, 1)
            if s.num_steps > 1 and rng.random() < 0.5:
                keep = set(np.flatnonzero(rng.random(s.num_steps - 1) < 0.6))
                keep.add(s.num_steps - 1)
                s = schedule_subset(s, keep)
            lay = layout_from_schedule(s)
            for restriction in (True, False):
                assert check_mask(build_nested_mask(lay, 1, restriction)).ok

    def test_detects_single_flipped_bit(self):
        mask = build_nested_mask(small_layout(), 1)
        flipped = np.array(mask.dense())
        flipped[3, 2] = not flipped[3, 2]
        bad = NestedMask(mask.n, 1, mask.layout_ref, True, flipped)
        report = check_mask(bad)
        assert not report.ok
        assert report.mismatch == (3, 2)

    def test_reports_rule_violation_on_random_matrix(self):
        rng = np.random.default_rng(1)
        mask = build_nested_mask(small_layout(), 1)
        noise = rng.random((mask.n, mask.n)) < 0.5
        bad = NestedMask(mask.n, 1, mask.layout_ref, True, noise)
        report = check_mask(bad)
        assert not report.ok and report.detail
