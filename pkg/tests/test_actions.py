import numpy as np
import pytest

from treatq.actions import (
    N_ACTIONS,
    REFERENCE_GRID,
    ActionGrid,
    action_components,
    action_id,
    bin_midpoints,
    discretize_action,
    discretize_doses,
    fit_action_grid,
)
from treatq.errors import DataError, InsufficientDataError


class TestFit:
    def test_uniform_vis_quintiles(self):
        # nonzero VIS 1..100 uniform -> nearest-rank 20/40/60/80th percentiles
        doses = [(float(f), float(v)) for f, v in zip(range(1, 101), range(1, 101))]
        grid = fit_action_grid(doses)
        assert grid.vis_cutoffs == (0.0, 20.0, 40.0, 60.0, 80.0)
        assert grid.fluid_cutoffs == (20.0, 40.0, 60.0, 80.0)

    def test_zero_doses_excluded_from_quintiles(self):
        fluid = [0.0] * 50 + list(np.linspace(10, 500, 50))
        vis = [0.0] * 50 + list(np.linspace(1, 25, 50))
        grid = fit_action_grid(list(zip(fluid, vis)))
        nz = np.sort(np.array(fluid)[np.array(fluid) > 0])
        assert grid.fluid_cutoffs[0] == nz[int(np.ceil(0.2 * len(nz))) - 1]

    def test_all_zero_vis_errors(self):
        doses = [(float(f), 0.0) for f in range(1, 20)]
        with pytest.raises(InsufficientDataError):
            fit_action_grid(doses)

    def test_too_few_distinct_errors(self):
        doses = [(100.0, 5.0)] * 30
        with pytest.raises(InsufficientDataError):
            fit_action_grid(doses)

    def test_fit_property_near_equal_bins(self):
        rng = np.random.default_rng(11)
        fluid = np.concatenate([np.zeros(100), rng.uniform(1, 2000, 1000)])
        vis = np.concatenate([np.zeros(400), rng.uniform(0.1, 40, 700)])
        grid = fit_action_grid(np.column_stack([fluid, vis]))
        ids = discretize_doses(grid, fluid, vis)
        fluid_bins = ids % 5 + 1
        vaso_bins = ids // 5 + 1
        nz_fluid_counts = np.bincount(fluid_bins[fluid > 0], minlength=6)[2:6]
        # bins 2..5 hold the upper 4 quintiles of the 1000 nonzero fluids
        assert np.all(np.abs(nz_fluid_counts - 200) <= 1)
        nz_vaso_counts = np.bincount(vaso_bins[vis > 0], minlength=7)[2:7]
        assert np.all(np.abs(nz_vaso_counts - 140) <= 1)


class TestDiscretize:
    def test_reference_boundaries(self):
        # right-closed bins from the reference cutoffs
        assert discretize_action(REFERENCE_GRID, 300.0, 0.0) == 2  # fluid bin 3, vaso bin 1
        assert discretize_action(REFERENCE_GRID, 0.0, 0.0) == 0
        a = discretize_action(REFERENCE_GRID, 100.0, 3.0)
        assert action_components(a) == (1, 2)

    def test_boundary_edges(self):
        assert action_components(discretize_action(REFERENCE_GRID, 960.0, 20.0)) == (4, 5)
        assert action_components(discretize_action(REFERENCE_GRID, 960.1, 20.1)) == (5, 6)
        assert action_components(discretize_action(REFERENCE_GRID, 0.0, 1e-9)) == (1, 2)

    def test_negative_dose(self):
        with pytest.raises(DataError):
            discretize_action(REFERENCE_GRID, -1.0, 0.0)

    def test_monotone_in_each_dose(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            f1, f2 = sorted(rng.uniform(0, 2000, 2))
            v = rng.uniform(0, 40)
            b1 = action_components(discretize_action(REFERENCE_GRID, f1, v))[0]
            b2 = action_components(discretize_action(REFERENCE_GRID, f2, v))[0]
            assert b1 <= b2
            v1, v2 = sorted(rng.uniform(0, 40, 2))
            f = rng.uniform(0, 2000)
            c1 = action_components(discretize_action(REFERENCE_GRID, f, v1))[1]
            c2 = action_components(discretize_action(REFERENCE_GRID, f, v2))[1]
            assert c1 <= c2


class TestEncoding:
    def test_corners(self):
        assert action_components(0) == (1, 1)
        assert action_components(29) == (5, 6)

    def test_round_trip_all(self):
        for a in range(N_ACTIONS):
            fb, vb = action_components(a)
            assert action_id(fb, vb) == a

    def test_out_of_range(self):
        with pytest.raises(DataError):
            action_components(30)
        with pytest.raises(DataError):
            action_id(0, 1)


class TestPartition:
    def test_every_pair_maps_to_one_bin(self):
        rng = np.random.default_rng(17)
        fluid = np.concatenate([rng.uniform(0, 3000, 5000), np.zeros(100), np.array(REFERENCE_GRID.fluid_cutoffs)])
        vis = np.concatenate([rng.uniform(0, 60, 5000), np.zeros(100), np.array([0, 1, 2, 3])])
        ids = discretize_doses(REFERENCE_GRID, fluid, vis)
        assert np.all((ids >= 0) & (ids < N_ACTIONS))
        # membership consistent with the printed interval semantics
        fc = (0.0,) + REFERENCE_GRID.fluid_cutoffs + (np.inf,)
        vc = REFERENCE_GRID.vis_cutoffs + (np.inf,)
        for f, v, a in zip(fluid[:500], vis[:500], ids[:500]):
            fb, vb = action_components(int(a))
            if fb == 1:
                assert 0.0 <= f <= fc[1]
            else:
                assert fc[fb - 1] < f <= fc[fb]
            if vb == 1:
                assert v == 0.0
            else:
                assert vc[vb - 2] < v <= vc[vb - 1]


class TestMidpoints:
    def test_reference_midpoints_round_trip(self):
        fluid_mid, vis_mid = bin_midpoints(REFERENCE_GRID)
        assert fluid_mid.tolist() == [50.0, 185.0, 385.0, 730.0, 1440.0]
        assert vis_mid.tolist() == [0.0, 1.5, 4.5, 8.0, 15.0, 30.0]
        for fb in range(1, 6):
            for vb in range(1, 7):
                a = discretize_action(REFERENCE_GRID, fluid_mid[fb - 1], vis_mid[vb - 1])
                assert action_components(a) == (fb, vb)


class TestSerialization:
    def test_json_round_trip(self):
        grid = ActionGrid((1.0, 2.0, 3.0, 4.0), (0.0, 1.0, 2.0, 3.0, 4.0))
        assert ActionGrid.from_dict(grid.to_dict()) == grid
