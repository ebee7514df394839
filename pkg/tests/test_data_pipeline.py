import json
import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import Polygon, box

from causalgrid import data_pipeline as dp
from causalgrid.data_pipeline import CrashRecord, ProjectedPoint, TractRecord


def crash(x, y, cat="Angle"):
    return CrashRecord(ProjectedPoint(x, y), cat, 2020)


def brute_cell(grid, cells, x, y):
    # independent point-in-rectangle scan over every kept cell
    for c in cells:
        x0, y0, x1, y1 = c.bounds
        if x0 <= x < x1 and y0 <= y < y1:
            return c.cell_id
    return -1


# -- grid ------------------------------------------------------------------------

def test_exact_tiling_four_cells():
    spec, cells = dp.build_grid((0, 0, 4000, 4000), 2000)
    assert len(cells) == 4
    assert [c.bounds for c in cells] == [(0, 0, 2000, 2000), (2000, 0, 4000, 2000),
                                         (0, 2000, 2000, 4000), (2000, 2000, 4000, 4000)]


def test_ceiling_tiling_keeps_truncated_edge_cells():
    spec, cells = dp.build_grid((0, 0, 5000, 3000), 2000)
    assert (spec.n_cols, spec.n_rows, len(cells)) == (3, 2, 6)
    ids = spec.locate([4999.0, 100.0], [2999.0, 2999.0])
    assert list(ids) == [5, 3]


@pytest.mark.parametrize("extent", [(0, 0, 0, 10), (0, 0, 10, -1), (0, 0, math.nan, 5)])
def test_degenerate_extent_rejected(extent):
    with pytest.raises(dp.DataError, match="degenerate"):
        dp.build_grid(extent, 2000)


def test_nonpositive_cell_size_rejected():
    with pytest.raises(dp.DataError):
        dp.build_grid((0, 0, 10, 10), 0)


def test_mask_keeps_cells_by_centroid():
    mask = Polygon([(0, 0), (4000, 0), (0, 4000)])  # lower-left triangle
    spec, cells = dp.build_grid((0, 0, 4000, 4000), 2000, mask=mask)
    # centroids (1000,1000) in, (3000,1000) on the hypotenuse, (1000,3000) on it, (3000,3000) out
    assert [c.cell_id for c in cells] == [0, 1, 2]
    assert len(cells) == int(np.asarray(spec.mask).sum())
    assert spec.locate([3500.0], [3500.0])[0] == -1


def test_grid_spec_round_trip():
    spec, _ = dp.build_grid((10, 20, 5000, 3000), 1000, mask=box(0, 0, 2600, 4000))
    back = dp.GridSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert np.array_equal(back.cell_ids, spec.cell_ids)
    assert back.origin == spec.origin


# -- crash assignment ----------------------------------------------------------------

def test_zero_crashes_gives_zero_counts():
    spec, _ = dp.build_grid((0, 0, 4000, 4000), 2000)
    tally = dp.assign_crashes([], spec)
    assert (tally.counts["Y"] == 0).all()
    assert tally.outside == tally.skipped == 0


def test_point_on_shared_edge_goes_to_right_cell():
    spec, _ = dp.build_grid((0, 0, 4000, 2000), 2000)
    tally = dp.assign_crashes([crash(2000.0, 500.0)], spec)
    assert tally.counts.loc[1, "Y"] == 1 and tally.counts.loc[0, "Y"] == 0


def test_non_finite_records_are_tallied_not_assigned():
    spec, _ = dp.build_grid((0, 0, 4000, 2000), 2000)
    tally = dp.assign_crashes([crash(math.nan, 1.0), crash(1.0, math.inf), crash(-5.0, 1.0), crash(1.0, 1.0)], spec)
    assert tally.skipped == 2
    assert tally.outside == 1
    assert tally.counts["Y"].sum() == 1


def test_unknown_category_rejected():
    with pytest.raises(dp.DataError, match="unknown crash category"):
        crash(0, 0, "Sideswipe")


def test_subtype_counts():
    spec, cells = dp.build_grid((0, 0, 2000, 2000), 2000)
    recs = [crash(1, 1, "Angle"), crash(2, 2, "Angle"), crash(3, 3, "Fatality")]
    tally = dp.assign_crashes(recs, spec)
    cell = tally.apply_to(cells)[0]
    assert cell.crash_count == 3
    assert cell.subtype_counts["Angle"] == 2 and cell.subtype_counts["Fatality"] == 1
    assert all(v <= cell.crash_count for v in cell.subtype_counts.values())


def test_assignment_matches_brute_force_scan(rng):
    spec, cells = dp.build_grid((0, 0, 10000, 6000), 2000, mask=box(0, 0, 7000, 7000))
    xs = rng.uniform(-1000, 11000, 1000)
    ys = rng.uniform(-1000, 7000, 1000)
    # put some points exactly on cell edges
    xs[:50] = rng.integers(0, 6, 50) * 2000.0
    tally = dp.assign_crashes(pd.DataFrame({"x": xs, "y": ys, "category": "Other", "year": 2020}), spec)
    expected = pd.Series([brute_cell(spec, cells, x, y) for x, y in zip(xs, ys)])
    counts = expected[expected >= 0].value_counts()
    for c in cells:
        assert tally.counts.loc[c.cell_id, "Y"] == counts.get(c.cell_id, 0)
    assert tally.outside == int((expected < 0).sum())


@given(st.lists(st.tuples(st.floats(-3000, 9000), st.floats(-3000, 9000),
                          st.sampled_from(dp.CATEGORIES)), max_size=60),
       st.lists(st.booleans(), max_size=10))
def test_partition_invariant(points, bad):
    spec, _ = dp.build_grid((0, 0, 6000, 6000), 2000, mask=box(0, 0, 4500, 6000))
    recs = [crash(x, y, c) for x, y, c in points] + [crash(math.nan, 0.0) for b in bad if b]
    tally = dp.assign_crashes(recs, spec)
    assert tally.counts["Y"].sum() + tally.outside == len(points)
    assert tally.skipped == sum(bad)
    cat_total = tally.counts[dp.CATEGORIES].sum(axis=1)
    assert (cat_total == tally.counts["Y"]).all()


@given(st.permutations(list(range(25))))
def test_assignment_independent_of_record_order(perm):
    spec, _ = dp.build_grid((0, 0, 6000, 4000), 2000)
    base = [crash(123.0 * k % 6000, 377.0 * k % 4000, dp.CATEGORIES[k % 7]) for k in range(25)]
    a = dp.assign_crashes(base, spec).counts
    b = dp.assign_crashes([base[i] for i in perm], spec).counts
    pd.testing.assert_frame_equal(a, b)


# -- areal weighting ---------------------------------------------------------------

def test_tract_inside_one_cell_is_identity():
    spec, _ = dp.build_grid((0, 0, 4000, 2000), 2000)
    out = dp.areal_weight_tracts([TractRecord(box(100, 100, 900, 900), 500, {"poverty": 10.0})], spec)
    assert out.loc[0, "poverty"] == 10.0
    assert bool(out.loc[1, "socio_missing"]) and math.isnan(out.loc[1, "poverty"])


def test_two_half_inside_tracts_hand_example():
    spec, _ = dp.build_grid((0, 0, 2000, 2000), 2000)
    tracts = [TractRecord(box(-1000, 0, 1000, 2000), 100, {"poverty": 10.0}),
              TractRecord(box(1000, 0, 3000, 2000), 300, {"poverty": 20.0})]
    out = dp.areal_weight_tracts(tracts, spec)
    assert out.loc[0, "poverty"] == 17.5
    assert out.loc[0, "socio_weight"] == 200.0


def test_exact_when_every_tract_inside_one_cell(rng):
    spec, _ = dp.build_grid((0, 0, 4000, 4000), 2000)
    tracts, expect = [], {}
    for cell in range(4):
        x0, y0, _, _ = spec.cell_bounds(cell)
        pops = rng.uniform(10, 100, 3)
        vals = rng.uniform(0, 100, 3)
        for j in range(3):
            tracts.append(TractRecord(box(x0 + 100 + 600 * j, y0 + 100, x0 + 600 * (j + 1), y0 + 1900),
                                      pops[j], {"a": vals[j]}))
        expect[cell] = math.fsum(pops * vals) / math.fsum(pops)
    out = dp.areal_weight_tracts(tracts, spec)
    for cell, v in expect.items():
        assert out.loc[cell, "a"] == pytest.approx(v, rel=0, abs=1e-12)


def test_zero_area_tract_excluded_with_warning():
    spec, _ = dp.build_grid((0, 0, 2000, 2000), 2000)
    flat = TractRecord(Polygon([(0, 0), (1000, 0), (2000, 0)]), 50, {"a": 90.0})
    ok = TractRecord(box(0, 0, 1000, 1000), 50, {"a": 30.0})
    with pytest.warns(UserWarning, match="zero area"):
        out = dp.areal_weight_tracts([flat, ok], spec)
    assert out.loc[0, "a"] == 30.0


def test_percentage_out_of_range_rejected():
    spec, _ = dp.build_grid((0, 0, 2000, 2000), 2000)
    with pytest.raises(dp.DataError, match="outside"):
        dp.areal_weight_tracts([TractRecord(box(0, 0, 10, 10), 5, {"a": 120.0})], spec)


def test_self_intersecting_tract_rejected():
    spec, _ = dp.build_grid((0, 0, 2000, 2000), 2000)
    bowtie = Polygon([(0, 0), (1000, 1000), (1000, 0), (0, 1800)])
    with pytest.raises(dp.DataError, match="invalid"):
        dp.areal_weight_tracts([TractRecord(bowtie, 5, {"a": 1.0})], spec)


def test_monte_carlo_resident_oracle():
    rng = np.random.default_rng(7)
    spec, _ = dp.build_grid((0, 0, 6000, 6000), 2000)
    tracts = [
        TractRecord(Polygon([(0, 0), (3500, 0), (2500, 4200), (0, 3000)]), 4000, {"pov": 12.0}),
        TractRecord(Polygon([(3500, 0), (6000, 0), (6000, 6000), (2500, 4200)]), 9000, {"pov": 31.0}),
        TractRecord(Polygon([(0, 3000), (2500, 4200), (6000, 6000), (0, 6000)]), 2500, {"pov": 55.0}),
    ]
    exact = dp.areal_weight_tracts(tracts, spec)
    # scatter residents uniformly inside each tract, total 1e5, proportional to population
    total_pop = sum(t.population for t in tracts)
    num = np.zeros(spec.n_lattice)
    den = np.zeros(spec.n_lattice)
    for t in tracts:
        m = int(round(1e5 * t.population / total_pop))
        x0, y0, x1, y1 = t.polygon.bounds
        pts = np.empty((0, 2))
        while len(pts) < m:
            cand = rng.uniform((x0, y0), (x1, y1), size=(4 * m, 2))
            import shapely
            pts = np.vstack([pts, cand[shapely.contains_xy(t.polygon, cand[:, 0], cand[:, 1])]])
        pts = pts[:m]
        cell = spec.locate(pts[:, 0], pts[:, 1])
        np.add.at(num, cell, t.attributes["pov"])
        np.add.at(den, cell, 1.0)
    mc = num / den
    for c in spec.cell_ids:
        assert abs(exact.loc[c, "pov"] - mc[c]) < 0.5


@given(st.permutations(list(range(4))))
def test_areal_weighting_order_independent(perm):
    spec, _ = dp.build_grid((0, 0, 4000, 4000), 2000)
    tracts = [TractRecord(box(-500 + 900 * k, 300 * k, 1300 + 900 * k, 3500), 100 + 37 * k, {"a": 3.3 * k + 1})
              for k in range(4)]
    a = dp.areal_weight_tracts(tracts, spec)
    b = dp.areal_weight_tracts([tracts[i] for i in perm], spec)
    pd.testing.assert_frame_equal(a, b, check_exact=True)


# -- entropy and images ---------------------------------------------------------------

def test_entropy_uniform_is_log2_18():
    assert abs(dp.visual_entropy(np.full(18, 1 / 18)) - math.log2(18)) <= 1e-12


def test_entropy_one_hot_and_two_way():
    assert dp.visual_entropy(np.eye(18)[3]) == 0.0
    assert dp.visual_entropy([0.5, 0.5] + [0.0] * 16) == pytest.approx(1.0, abs=1e-15)


def test_entropy_renormalizes():
    assert dp.visual_entropy([0.2, 0.2] + [0.0] * 16) == pytest.approx(1.0, abs=1e-15)


def test_entropy_all_zero_rejected():
    with pytest.raises(dp.DataError, match="all-zero"):
        dp.visual_entropy(np.zeros(18))


def test_entropy_negative_rejected():
    with pytest.raises(dp.DataError):
        dp.visual_entropy([-0.1, 0.5] + [0.0] * 16)


@given(st.lists(st.floats(0, 1), min_size=18, max_size=18).filter(lambda v: sum(v) > 1e-6), st.randoms())
def test_entropy_bounds_and_permutation_invariance(p, rnd):
    h = dp.visual_entropy(p)
    assert 0.0 <= h <= math.log2(18) + 1e-12
    q = list(p)
    rnd.shuffle(q)
    assert dp.visual_entropy(q) == pytest.approx(h, abs=1e-12)
    assert h <= dp.visual_entropy(np.full(18, 1 / 18)) + 1e-12


def _image(pid, x, y, props, heading=0):
    return dp.ImageRecord(pid, ProjectedPoint(x, y), heading, tuple(props))


def test_single_image_cell_mean_is_the_image():
    spec, _ = dp.build_grid((0, 0, 4000, 2000), 2000)
    props = np.r_[0.3, 0.2, np.full(16, 0.03)]
    out = dp.aggregate_images([_image("a", 10, 10, props)], spec)
    assert np.allclose(out.loc[0, dp.SEG_COLUMNS].to_numpy(dtype=float), props, atol=0, rtol=0)
    assert bool(out.loc[1, "visual_missing"]) and out.loc[1, "n_images"] == 0


def test_entropy_mean_of_two_images():
    spec, _ = dp.build_grid((0, 0, 2000, 2000), 2000)
    one_hot = np.eye(18)[0]
    half = np.r_[0.5, 0.5, np.zeros(16)]
    out = dp.aggregate_images([_image("a", 1, 1, one_hot), _image("b", 2, 2, half, 90)], spec)
    assert out.loc[0, "entropy"] == 0.5


def test_image_validation():
    spec, _ = dp.build_grid((0, 0, 2000, 2000), 2000)
    with pytest.raises(dp.DataError, match="sum"):
        dp.aggregate_images([_image("a", 1, 1, np.full(18, 0.1))], spec)
    with pytest.raises(dp.DataError, match="heading"):
        dp.aggregate_images([_image("a", 1, 1, np.full(18, 0.01), heading=45)], spec)


def test_image_aggregation_order_independent(rng):
    spec, _ = dp.build_grid((0, 0, 4000, 4000), 2000)
    P = rng.dirichlet(np.ones(18), size=40) * 0.97
    xy = rng.uniform(0, 4000, size=(40, 2))
    imgs = [_image(f"p{i}", *xy[i], P[i]) for i in range(40)]
    a = dp.aggregate_images(imgs, spec)
    b = dp.aggregate_images([imgs[i] for i in rng.permutation(40)], spec)
    pd.testing.assert_frame_equal(a, b, check_exact=True)


def test_full_scale_image_count_arithmetic():
    # sample points times four headings
    assert 57088 * len(dp.HEADINGS) == 228352


# -- files -------------------------------------------------------------------------------

def test_grid_file_round_trip(tmp_path):
    from causalgrid.synthetic import write_toy_inputs

    paths = write_toy_inputs(tmp_path / "in", seed=3)
    spec, _ = dp.build_grid((0, 0, 12000, 10000), 2000)
    table = dp.build_grid_table(spec, dp.read_crashes(paths["crashes"]), dp.read_tracts(paths["tracts"]),
                                dp.read_images(paths["images"]))
    assert len(table) == 30
    assert table["Y"].sum() == len(pd.read_csv(paths["crashes"]))
    assert table["entropy"].between(0, math.log2(18)).all()
    dp.write_grid(tmp_path / "grid.geojson", spec, table)
    spec2, table2 = dp.read_grid(tmp_path / "grid.geojson")
    assert np.array_equal(spec2.cell_ids, spec.cell_ids)
    pd.testing.assert_frame_equal(table2[table.columns], table, check_dtype=False)


def test_read_crashes_requires_columns(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,y,year\n1,2,2020\n")
    with pytest.raises(dp.DataError, match="category"):
        dp.read_crashes(p)
