import numpy as np
import pytest

from ddlod.core.assembly import assemble
from ddlod.core.coeff import make_heterogeneous, make_identity
from ddlod.core.grid import build_hierarchy
from ddlod.core.lod import (
    BASIS_HEADER_DTYPE,
    SchwarzPreconditioner,
    basis_fingerprint,
    build_basis,
    build_pi_h,
    check_localization,
    corrector_iterations,
    corrector_pcg,
    kernel_project,
    load_basis,
    ms_operators,
    save_basis,
    solve_elliptic,
    support_radius,
)
from ddlod.exceptions import BasisFormatError, DimensionError, LocalizationError, MeshError


def energy(ops, v):
    return float(np.sqrt(max(v @ (ops.stiffness @ v), 0.0)))


@pytest.mark.parametrize("nH, j, expected", [(10, 3, 7), (80, 6, 27), (4, 3, 5), (2, 1, 1)])
def test_corrector_iterations(nH, j, expected):
    assert corrector_iterations(nH, j) == expected


class TestQuasiInterpolant:
    def test_projection_identity(self, hierarchy):
        pi = build_pi_h(hierarchy)
        product = (pi.matrix @ pi.embedding).toarray()
        assert np.abs(product - np.eye(pi.m)).max() <= 1e-12

    def test_kernel_projector_is_idempotent(self, hierarchy, rng):
        pi = build_pi_h(hierarchy)
        once = kernel_project(pi, rng.standard_normal(hierarchy.fine.n_interior))
        assert np.abs(kernel_project(pi, once) - once).max() <= 1e-12
        assert np.abs(pi.apply(once)).max() <= 1e-12

    def test_reproduces_coarse_functions(self, hierarchy, rng):
        pi = build_pi_h(hierarchy)
        coarse = rng.standard_normal(pi.m)
        assert np.allclose(pi.apply(pi.embedding @ coarse), coarse, atol=1e-12)

    def test_stability_constant(self, rng):
        for hier in (build_hierarchy(4, 16, 4), build_hierarchy(8, 32, 8)):
            pi = build_pi_h(hier)
            dense = pi.matrix.toarray()
            norm = np.linalg.norm(dense, 2)
            # Schur test
            bound = np.sqrt(np.abs(dense).sum(axis=1).max() * np.abs(dense).sum(axis=0).max())
            assert 0 < norm <= bound * (1 + 1e-12)
            for _ in range(100):
                v = rng.standard_normal(hier.fine.n_interior)
                assert np.linalg.norm(pi.apply(v)) <= norm * (1 + 1e-12) * np.linalg.norm(v)


class TestCorrectors:
    @pytest.fixture(scope="class")
    def schwarz(self, hierarchy, ops16):
        pi = build_pi_h(hierarchy)
        prec = SchwarzPreconditioner(hierarchy, ops16, pi)
        return pi, prec

    @pytest.fixture(scope="class")
    def identity_schwarz(self, hierarchy, identity_ops16):
        pi = build_pi_h(hierarchy)
        return pi, SchwarzPreconditioner(hierarchy, identity_ops16, pi)

    def exact_corrector(self, ops, pi, i):
        """a(w, v) = a(phi_i, v) on ker Pi_H from the dense saddle-point system"""
        K = ops.stiffness.toarray()
        C = pi.matrix.toarray()
        n, m = K.shape[0], C.shape[0]
        saddle = np.block([[K, C.T], [C, np.zeros((m, m))]])
        rhs = np.concatenate([K @ pi.embedding[:, i].toarray().ravel(), np.zeros(m)])
        return np.linalg.solve(saddle, rhs)[:n]

    @pytest.mark.parametrize("operators, preconditioner", [
        ("ops16", "schwarz"),
        ("identity_ops16", "identity_schwarz"),
    ], ids=["heterogeneous", "identity"])
    @pytest.mark.parametrize("k, tol", [(20, 1e-6), (40, 1e-8), (80, 1e-8)])
    def test_large_k_matches_saddle_point(self, request, operators, preconditioner, k, tol):
        ops = request.getfixturevalue(operators)
        pi, prec = request.getfixturevalue(preconditioner)
        for i in range(pi.m):
            exact = self.exact_corrector(ops, pi, i)
            approx = corrector_pcg(ops, pi, prec, i, k)
            assert energy(ops, approx - exact) <= tol * max(1.0, energy(ops, exact))
            assert np.abs(pi.apply(approx)).max() <= 1e-10

    def test_converged_columns_stay_put(self, ops16, schwarz):
        pi, prec = schwarz
        assert np.allclose(corrector_pcg(ops16, pi, prec, 4, 40), corrector_pcg(ops16, pi, prec, 4, 80),
                           rtol=0, atol=1e-8)

    def test_single_star_converges_in_one_step(self):
        hier = build_hierarchy(2, 16, 2)
        ops = assemble(hier.fine, make_identity(16), hier.control)
        pi = build_pi_h(hier)
        prec = SchwarzPreconditioner(hier, ops, pi)
        exact = self.exact_corrector(ops, pi, 0)
        for k in (1, 3, 10):
            approx = corrector_pcg(ops, pi, prec, 0, k)
            assert energy(ops, approx - exact) <= 1e-9 * energy(ops, exact)

    @pytest.mark.parametrize("nH, nh", [(8, 16), (6, 12)])
    def test_refinement_ratio_below_three_is_rejected(self, nH, nh):
        hier = build_hierarchy(nH, nh, nH)
        ops = assemble(hier.fine, make_identity(nh), hier.control)
        with pytest.raises(MeshError, match="nh >= 3"):
            SchwarzPreconditioner(hier, ops, build_pi_h(hier))

    def test_geometric_decay(self, ops16, schwarz):
        pi, prec = schwarz
        exact = self.exact_corrector(ops16, pi, 4)
        errors = np.array([energy(ops16, corrector_pcg(ops16, pi, prec, 4, k) - exact) for k in range(0, 25)])
        assert errors[0] == pytest.approx(energy(ops16, exact))
        assert np.all(np.diff(errors) <= 1e-12 * errors[0])
        count = max(3, int(np.sum(errors > 1e-9 * errors[0])))
        slope, _ = np.polyfit(np.arange(count), np.log(np.maximum(errors[:count], 1e-300)), 1)
        assert np.exp(slope) < 0.9

    def test_k_zero_and_bad_hat(self, ops16, schwarz):
        pi, prec = schwarz
        assert not corrector_pcg(ops16, pi, prec, 0, 0).any()
        with pytest.raises(DimensionError):
            corrector_pcg(ops16, pi, prec, pi.m, 3)
        with pytest.raises(ValueError):
            corrector_pcg(ops16, pi, prec, 0, -1)


class TestBasis:
    @pytest.fixture(scope="class")
    def local_setup(self):
        hier = build_hierarchy(16, 64, 16)
        field = make_heterogeneous(5, 16, 1.0, 10.0, 64)
        ops = assemble(hier.fine, field, hier.control)
        return hier, field, ops

    def test_supports_stay_in_patches(self, local_setup):
        hier, field, ops = local_setup
        basis = build_basis(hier, ops, field, k=1)
        check_localization(basis, hier, 4)
        assert basis.meta.support_radius <= 4
        assert basis.meta.support_radius == support_radius(basis, hier)
        # exact zeros far from the vertex
        assert basis.support(0).size < ops.n_dofs // 4

    def test_localization_violation_detected(self, local_setup):
        hier, field, ops = local_setup
        basis = build_basis(hier, ops, field, k=2)
        if basis.meta.support_radius > 0:
            with pytest.raises(LocalizationError):
                check_localization(basis, hier, basis.meta.support_radius - 1)

    def test_threads_do_not_change_the_basis(self, hierarchy, ops16, field16):
        serial = build_basis(hierarchy, ops16, field16, k=3, threads=1, chunk_size=2)
        parallel = build_basis(hierarchy, ops16, field16, k=3, threads=3, chunk_size=2)
        assert (serial.columns != parallel.columns).nnz == 0

    def test_k_from_j(self, hierarchy, ops16, field16):
        basis = build_basis(hierarchy, ops16, field16, j=2)
        assert basis.meta.k == corrector_iterations(4, 2)
        assert basis.meta.j == 2

    def test_fingerprint(self, field16):
        assert basis_fingerprint(field16, 4, 16, 3) == basis_fingerprint(field16, 4, 16, 3)
        assert basis_fingerprint(field16, 4, 16, 3) != basis_fingerprint(field16, 4, 16, 4)


class TestBasisFile:
    @pytest.fixture(scope="class")
    def basis(self, hierarchy, ops16, field16):
        return build_basis(hierarchy, ops16, field16, k=3)

    def test_round_trip(self, basis, tmp_path):
        loaded = load_basis(save_basis(basis, tmp_path / "cache" / "b.bin"))
        assert (loaded.columns != basis.columns).nnz == 0
        assert loaded.meta.fingerprint == basis.meta.fingerprint
        assert (loaded.meta.nH, loaded.meta.nh, loaded.meta.k) == (4, 16, 3)

    def test_bad_magic(self, basis, tmp_path):
        path = save_basis(basis, tmp_path / "b.bin")
        data = path.read_bytes()
        path.write_bytes(b"GARBAGE!" + data[8:])
        with pytest.raises(BasisFormatError):
            load_basis(path)

    def test_truncated(self, basis, tmp_path):
        path = save_basis(basis, tmp_path / "b.bin")
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(BasisFormatError):
            load_basis(path)
        path.write_bytes(data[: BASIS_HEADER_DTYPE.itemsize - 1])
        with pytest.raises(BasisFormatError):
            load_basis(path)

    def test_trailing_bytes(self, basis, tmp_path):
        path = save_basis(basis, tmp_path / "b.bin")
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(BasisFormatError):
            load_basis(path)


class TestReducedOperators:
    def test_shapes_and_symmetry(self, hierarchy, ops16, field16):
        reduced = ms_operators(build_basis(hierarchy, ops16, field16, k=3), ops16)
        assert reduced.m == 9
        assert reduced.control_coupling.shape == (9, 16)
        assert np.allclose(reduced.stiffness, reduced.stiffness.T)
        assert np.linalg.eigvalsh(reduced.stiffness).min() > 0

    def test_galerkin_orthogonality(self, hierarchy, ops16, field16):
        basis = build_basis(hierarchy, ops16, field16, k=3)
        comparison = solve_elliptic(ops16, ms_operators(basis, ops16))
        residual = basis.columns.T @ (ops16.stiffness @ (comparison.y_fine - comparison.y_ms))
        scale = np.abs(basis.columns.T @ (ops16.stiffness @ comparison.y_fine)).max()
        assert np.abs(residual).max() <= 1e-10 * scale
        assert comparison.energy_error < comparison.energy_norm

    def test_errors_decrease_with_H(self):
        nh = 32
        field = make_identity(nh)
        l2, en = [], []
        for nH in (2, 4, 8):
            hier = build_hierarchy(nH, nh, nH)
            ops = assemble(hier.fine, field, hier.control)
            comparison = solve_elliptic(ops, ms_operators(build_basis(hier, ops, field, j=3), ops))
            l2.append(comparison.l2_error / comparison.l2_norm)
            en.append(comparison.energy_error / comparison.energy_norm)
        assert l2[0] > l2[1] > l2[2]
        assert en[0] > en[1] > en[2]

    def test_basis_size_mismatch(self, hierarchy, ops16, field16):
        basis = build_basis(hierarchy, ops16, field16, k=1)
        other = assemble(build_hierarchy(4, 8, 4).fine, make_identity(8), build_hierarchy(4, 8, 4).control)
        with pytest.raises(DimensionError):
            ms_operators(basis, other)
