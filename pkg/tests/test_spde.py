"""Mesh construction, FEM assembly and the field precision."""

import numpy as np
import pytest
import scipy.sparse as sp

from stmap.errors import GeometryError, ParameterError
from stmap.spde import (Mesh, build_mesh, build_projector, convert_params,
                        fem_matrices, invert_params, matern_correlation,
                        spde_precision)
from stmap.sparse import SparseCholesky


class TestBuildMesh:
    def test_three_points_single_triangle(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        mesh = build_mesh(pts, max_edge=100.0)
        assert mesh.m == 3
        assert mesh.triangles.shape == (1, 3)

    def test_extension_makes_inputs_interior(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        mesh = build_mesh(pts, max_edge=0.5, extension=1.0)
        hull_nodes = mesh.nodes[mesh.boundary]
        # every original corner strictly inside the hull's bounding circle
        center = hull_nodes.mean(axis=0)
        r_hull = np.hypot(*(hull_nodes - center).T).min()
        for p in pts:
            assert np.hypot(*(p - center)) < r_hull
        # and the projector accepts them, which requires containment
        build_projector(mesh, pts)

    def test_collinear_points_rejected(self):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        with pytest.raises(GeometryError):
            build_mesh(pts, max_edge=1.0)

    def test_random_points_orientation_oracle(self, rng):
        pts = rng.uniform(0, 2, (100, 2))
        mesh = build_mesh(pts, max_edge=0.5, cutoff=0.01, extension=0.3)
        p = mesh.nodes[mesh.triangles]
        signed = 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        assert np.all(signed > 0)  # CCW and non-degenerate
        # every input point lands in some triangle (brute-force orientation test)
        A = build_projector(mesh, pts).A
        assert A.shape == (100, mesh.m)

    def test_max_edge_respected_on_interior_edges(self, rng):
        pts = rng.uniform(0, 2, (40, 2))
        mesh = build_mesh(pts, max_edge=0.4, extension=0.5)
        counts = {}
        for tri in mesh.triangles:
            for u, v in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(u, v), max(u, v))
                counts[key] = counts.get(key, 0) + 1
        for (u, v), c in counts.items():
            if c == 2:
                assert np.hypot(*(mesh.nodes[u] - mesh.nodes[v])) <= 0.4 * (1 + 1e-9)

    def test_cutoff_thins_duplicates(self):
        pts = np.array([[0.0, 0.0], [0.001, 0.0], [1.0, 0.0], [0.0, 1.0]])
        mesh = build_mesh(pts, max_edge=10.0, cutoff=0.01)
        assert mesh.m == 3

    def test_json_roundtrip(self, rng, tmp_path):
        mesh = build_mesh(rng.uniform(0, 1, (12, 2)), max_edge=0.5)
        path = tmp_path / "mesh.json"
        mesh.save(path)
        back = Mesh.load(path)
        np.testing.assert_array_equal(back.nodes, mesh.nodes)
        np.testing.assert_array_equal(back.triangles, mesh.triangles)
        np.testing.assert_array_equal(back.boundary, mesh.boundary)


class TestFemMatrices:
    def test_unit_right_triangle_hand_assembly(self):
        mesh = build_mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                          max_edge=100.0)
        fem = fem_matrices(mesh)
        np.testing.assert_allclose(fem.c, np.full(3, 1.0 / 6.0))
        # order nodes as (0,0), (1,0), (0,1) for comparison
        order = np.lexsort((mesh.nodes[:, 0], mesh.nodes[:, 1]))
        G = fem.G.toarray()[np.ix_(order, order)]
        expected = np.array([[1.0, -0.5, -0.5],
                             [-0.5, 0.5, 0.0],
                             [-0.5, 0.0, 0.5]])
        np.testing.assert_allclose(G, expected, atol=1e-14)

    def test_zero_row_sums(self, rng):
        mesh = build_mesh(rng.uniform(0, 3, (50, 2)), max_edge=0.8)
        fem = fem_matrices(mesh)
        assert np.abs(np.asarray(fem.G.sum(axis=1))).max() < 1e-12

    def test_mass_conserves_area(self, rng):
        mesh = build_mesh(rng.uniform(0, 3, (50, 2)), max_edge=0.8)
        fem = fem_matrices(mesh)
        assert fem.c.sum() == pytest.approx(mesh.triangle_areas().sum(), rel=1e-12)


class TestSpdePrecision:
    def test_spd(self, rng):
        mesh = build_mesh(rng.uniform(0, 2, (30, 2)), max_edge=0.6)
        fem = fem_matrices(mesh)
        Q = spde_precision(fem, kappa=3.0, tau=0.1)
        SparseCholesky(Q.Q)  # raises if not SPD

    def test_tau_scaling_exact(self, rng):
        mesh = build_mesh(rng.uniform(0, 2, (20, 2)), max_edge=0.8)
        fem = fem_matrices(mesh)
        Q1 = spde_precision(fem, kappa=2.0, tau=0.3).Q
        Q2 = spde_precision(fem, kappa=2.0, tau=0.6).Q
        assert abs(Q2 - 4.0 * Q1).max() == 0.0

    def test_invalid_parameters(self, rng):
        mesh = build_mesh(rng.uniform(0, 1, (10, 2)), max_edge=1.0)
        fem = fem_matrices(mesh)
        with pytest.raises(ParameterError):
            spde_precision(fem, kappa=-1.0, tau=0.1)
        with pytest.raises(ParameterError):
            spde_precision(fem, kappa=1.0, tau=0.0)

    def test_correlation_matches_bessel_on_small_dense_mesh(self):
        # structured grid: dense-inverse correlations vs the closed form
        g = np.linspace(0.0, 4.0, 17)
        pts = np.array([(x, y) for x in g for y in g])
        mesh = build_mesh(pts, max_edge=100.0)
        fem = fem_matrices(mesh)
        rho = 1.0
        kappa, tau = convert_params(rho, 1.0)
        S = np.linalg.inv(spde_precision(fem, kappa, tau).Q.toarray())
        sd = np.sqrt(np.diag(S))
        center = int(np.argmin(((mesh.nodes - [2.0, 2.0]) ** 2).sum(axis=1)))
        d = np.hypot(*(mesh.nodes - mesh.nodes[center]).T)
        inner = (np.abs(mesh.nodes - 2.0).max(axis=1) < 1.0) & (d <= 2 * rho)
        corr = S[center, inner] / (sd[center] * sd[inner])
        theory = matern_correlation(d[inner], kappa)
        assert np.abs(corr - theory).max() < 0.05

    def test_marginal_sd_matches_target_interior(self):
        g = np.linspace(0.0, 4.0, 15)
        pts = np.array([(x, y) for x in g for y in g])
        mesh = build_mesh(pts, max_edge=100.0)   # 225 nodes
        fem = fem_matrices(mesh)
        sigma = 0.7
        kappa, tau = convert_params(0.8, sigma)
        S = np.linalg.inv(spde_precision(fem, kappa, tau).Q.toarray())
        sd = np.sqrt(np.diag(S))
        interior = np.abs(mesh.nodes - 2.0).max(axis=1) < 1.0
        assert np.all(np.abs(sd[interior] - sigma) / sigma < 0.10)


class TestMaternCorrelation:
    def test_at_zero(self):
        assert matern_correlation(0.0, kappa=2.0) == 1.0

    def test_at_range_distance(self):
        # rho = sqrt(8)/kappa; correlation there is near 0.13
        import mpmath
        kappa = 4.9797
        rho = np.sqrt(8.0) / kappa
        val = matern_correlation(rho, kappa)
        oracle = float(np.sqrt(8) * mpmath.besselk(1, np.sqrt(8)))
        assert val == pytest.approx(oracle, abs=1e-10)
        assert val == pytest.approx(0.139, abs=0.005)

    def test_strictly_decreasing_and_continuous(self):
        kappa = 3.0
        d = np.linspace(0.0, 5.0, 101)
        vals = matern_correlation(d, kappa)
        assert np.all(np.diff(vals) < 0)
        assert matern_correlation(1e-12, kappa) == pytest.approx(1.0, abs=1e-6)


class TestConvertParams:
    def test_rho_sqrt8_gives_unit_kappa(self):
        kappa, _ = convert_params(np.sqrt(8.0), 1.0)
        assert kappa == pytest.approx(1.0, rel=1e-14)

    def test_paper_scale_range(self):
        kappa, _ = convert_params(0.568, 1.0)
        assert kappa == pytest.approx(np.sqrt(8.0) / 0.568, rel=1e-12)
        assert kappa == pytest.approx(4.9797, abs=5e-4)

    def test_roundtrip(self):
        kappa, tau = convert_params(0.73, 0.41)
        rho, sigma = invert_params(kappa, tau)
        assert rho == pytest.approx(0.73, abs=1e-12)
        assert sigma == pytest.approx(0.41, abs=1e-12)

    def test_rejects_nonpositive(self):
        with pytest.raises(ParameterError):
            convert_params(-0.1, 1.0)
        with pytest.raises(ParameterError):
            convert_params(1.0, 0.0)


class TestProjector:
    def test_node_location_gives_unit_row(self, rng):
        mesh = build_mesh(rng.uniform(0, 1, (15, 2)), max_edge=0.5)
        A = build_projector(mesh, mesh.nodes[[4]]).A
        row = A.toarray()[0]
        assert row.max() == pytest.approx(1.0)
        assert row.sum() == pytest.approx(1.0)

    def test_centroid_gives_equal_thirds(self):
        mesh = build_mesh(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]),
                          max_edge=100.0)
        centroid = mesh.nodes.mean(axis=0, keepdims=True)
        A = build_projector(mesh, centroid).A
        np.testing.assert_allclose(np.sort(A.toarray()[0]), [1 / 3] * 3, atol=1e-12)

    def test_linear_reproduction(self, rng):
        mesh = build_mesh(rng.uniform(0, 2, (40, 2)), max_edge=0.7, extension=0.5)
        pts = rng.uniform(0.2, 1.8, (30, 2))
        A = build_projector(mesh, pts).A
        np.testing.assert_allclose(A @ mesh.nodes[:, 0], pts[:, 0], atol=1e-10)
        np.testing.assert_allclose(A @ mesh.nodes[:, 1], pts[:, 1], atol=1e-10)

    def test_row_structure(self, rng):
        mesh = build_mesh(rng.uniform(0, 2, (25, 2)), max_edge=0.8)
        pts = rng.uniform(0.3, 1.7, (20, 2))
        A = build_projector(mesh, pts).A
        assert np.all(A.data >= 0)
        np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel(), 1.0, atol=1e-12)
        assert np.all(np.diff(A.indptr) <= 3)

    def test_outside_hull_raises(self, rng):
        mesh = build_mesh(rng.uniform(0, 1, (12, 2)), max_edge=1.0)
        with pytest.raises(GeometryError):
            build_projector(mesh, np.array([[5.0, 5.0]]))


class TestSparseCholesky:
    def test_matches_dense(self, rng):
        A = sp.random(40, 40, density=0.1, random_state=3)
        Q = (A @ A.T + sp.identity(40) * 3.0).tocsc()
        chol = SparseCholesky(Q)
        assert chol.logdet == pytest.approx(np.linalg.slogdet(Q.toarray())[1], abs=1e-9)
        b = rng.standard_normal(40)
        np.testing.assert_allclose(chol.solve(b), np.linalg.solve(Q.toarray(), b),
                                   atol=1e-10)

    def test_sampling_covariance(self, rng):
        A = sp.random(12, 12, density=0.3, random_state=5)
        Q = (A @ A.T + sp.identity(12) * 4.0).tocsc()
        chol = SparseCholesky(Q)
        X = chol.sample_zero_mean(rng, size=60000)
        S = np.cov(X)
        Qinv = np.linalg.inv(Q.toarray())
        se = np.sqrt((np.outer(np.diag(Qinv), np.diag(Qinv)) + Qinv**2) / 60000)
        assert (np.abs(S - Qinv) / se).max() < 5.0

    def test_rejects_indefinite(self):
        Q = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))  # eigenvalues 3, -1
        from stmap.errors import NumericalError
        with pytest.raises(NumericalError):
            SparseCholesky(Q)
