"""
Tests for the membrane, stabilization, bulk and load assembly.

Covers:
1. Energies of hand-integrable fields
2. Algebraic invariants (symmetry, rigid-body kernel, positive semidefiniteness)
3. Bulk/membrane coupling and Dirichlet elimination
4. Exact reproduction of linear displacement fields on a flat membrane
"""

import numpy as np
import pytest
import scipy.sparse as sp

from analysis import cylinder_load, recover_stress, stress_error_L2, stress_norm_L2
from assembly import (
    BulkMaterial,
    DofMap,
    LoadField,
    MembraneMaterial,
    SolutionField,
    SparseSystem,
    StabilizationParams,
    apply_dirichlet,
    assemble_bulk,
    assemble_membrane,
    assemble_membrane_load,
    assemble_stabilization,
    couple,
    rigid_body_modes,
)
from background_mesh import build_structured
from cut_geometry import extract_surface
from errors import ContractViolation
from level_set import (
    BoxSelector,
    CylinderLevelSet,
    DirichletSet,
    PlaneLevelSet,
    PlaneSelector,
    classify,
    dirichlet_nodes,
    discretize,
)
from solver import solve_direct
from tangential_ops import membrane_stress, projector, surface_strain


def stretch_x(points):
    u = np.zeros_like(points)
    u[:, 0] = points[:, 0]
    return u


def matrix_scale(A):
    return float(abs(A).sum(axis=1).max())


def membrane_system(active, material, tau0=1.0, dirichlet=()):
    surface = extract_surface(active)
    dofs = DofMap.for_band(active, dirichlet)
    system = SparseSystem(dofs)
    assemble_membrane(surface, material, dofs, system)
    assemble_stabilization(active, StabilizationParams(tau0), dofs, system)
    return surface, dofs, system


# =============================================================================
# Fixtures
# =============================================================================


@pytest.fixture
def soft_membrane():
    """E = 1, nu = 0: mu = 1/2, lambda = 0."""
    return MembraneMaterial(E=1.0, nu=0.0, t=1.0)


@pytest.fixture
def rubber():
    return BulkMaterial(E=1.0, nu=0.3)


@pytest.fixture(params=["tet4", "hex8"])
def flat_cube_band(request):
    """Plane z = 0.5 through the unit cube meshed by one hex or six tets."""
    mesh = build_structured(((0, 0, 0), (1, 1, 1)), 1, 1, 1, request.param)
    return classify(discretize(PlaneLevelSet(offset=0.5), mesh))


# =============================================================================
# Materials and containers
# =============================================================================


class TestMaterials:
    def test_membrane_lame(self):
        mat = MembraneMaterial(E=100.0, nu=0.5, t=0.01)
        assert mat.mu == pytest.approx(100.0 / 3.0)
        assert mat.lam == pytest.approx(200.0 / 3.0)

    def test_null_membrane_allowed(self):
        assert MembraneMaterial(E=0.0, nu=0.3).mu == 0.0

    @pytest.mark.parametrize("kwargs", [{"E": -1.0, "nu": 0.3}, {"E": 1.0, "nu": 1.0}, {"E": 1.0, "nu": 0.3, "t": 0.0}])
    def test_invalid_membrane(self, kwargs):
        with pytest.raises(ValueError):
            MembraneMaterial(**kwargs)

    def test_bulk_rejects_incompressible(self):
        with pytest.raises(ValueError):
            BulkMaterial(E=1.0, nu=0.5)

    def test_bulk_lame(self):
        mat = BulkMaterial(E=100.0, nu=0.25)
        assert mat.mu == pytest.approx(40.0)
        assert mat.lam == pytest.approx(40.0)

    def test_negative_tau0(self):
        with pytest.raises(ValueError):
            StabilizationParams(-1.0)


class TestDofMap:
    def test_numbering(self, unit_hex):
        dofs = DofMap(unit_hex, np.array([5, 2]))
        assert dofs.n_dofs == 6
        assert dofs.cell_dofs(np.array([[5, 2]])).tolist() == [[3, 4, 5, 0, 1, 2]]

    def test_cell_outside_map(self, unit_hex):
        dofs = DofMap(unit_hex, np.array([0, 1]))
        with pytest.raises(IndexError):
            dofs.cell_dofs(np.array([[0, 7]]))

    def test_constrained_components(self, unit_hex):
        clamp = dirichlet_nodes(unit_hex, BoxSelector((0, 0, 0), (0, 0, 0)), components=("y",))
        dofs = DofMap.for_mesh(unit_hex, [clamp])
        assert dofs.constrained.tolist() == [1]
        assert np.count_nonzero(~dofs.free_mask) == 1

    def test_dirichlet_outside_map(self, unit_hex):
        clamp = dirichlet_nodes(unit_hex, BoxSelector((1, 1, 1), (1, 1, 1)))
        with pytest.raises(ContractViolation):
            DofMap(unit_hex, np.array([0, 1]), [clamp])


class TestSparseSystem:
    def test_duplicates_are_summed(self, unit_hex):
        system = SparseSystem(DofMap(unit_hex, np.array([0, 1])))
        index = np.array([[0, 1, 2]])
        block = np.arange(9.0).reshape(1, 3, 3)
        system.add_blocks(index, block)
        system.add_blocks(index, block)
        assert np.allclose(system.matrix.toarray()[:3, :3], 2.0 * block[0])

    def test_add_rhs_accumulates(self, unit_hex):
        system = SparseSystem(DofMap(unit_hex, np.array([0])))
        system.add_rhs(np.array([0, 0, 2]), np.array([1.0, 1.0, 3.0]))
        assert system.rhs.tolist() == [2.0, 0.0, 3.0]


# =============================================================================
# Membrane form
# =============================================================================


class TestAssembleMembrane:
    def test_empty_surface_adds_nothing(self, flat_cube_band, soft_membrane):
        from cut_geometry import empty_surface

        dofs = DofMap.for_band(flat_cube_band)
        system = SparseSystem(dofs)
        assemble_membrane(empty_surface(flat_cube_band.mesh.cell_kind), soft_membrane, dofs, system)
        assert system.matrix.nnz == 0

    def test_uniaxial_stretch_energy(self, flat_cube_band, soft_membrane):
        _, dofs, system = membrane_system(flat_cube_band, soft_membrane, tau0=0.0)
        v = dofs.interpolate(stretch_x)
        assert system.energy(v) == pytest.approx(1.0, rel=1e-12)

    def test_thickness_scales_energy(self, flat_cube_band):
        _, dofs, thin = membrane_system(flat_cube_band, MembraneMaterial(E=1.0, nu=0.0, t=0.01), tau0=0.0)
        assert thin.energy(dofs.interpolate(stretch_x)) == pytest.approx(0.01, rel=1e-12)

    def test_translation_is_free(self, flat_cube_band, soft_membrane):
        _, dofs, system = membrane_system(flat_cube_band, soft_membrane, tau0=0.0)
        v = np.tile([0.3, -0.2, 0.7], dofs.n_nodes)
        assert abs(system.energy(v)) < 1e-12

    def test_rigid_modes_in_kernel(self, tilted_band, soft_membrane):
        _, dofs, system = membrane_system(tilted_band, soft_membrane, tau0=1.0)
        A = system.matrix
        modes = rigid_body_modes(dofs)
        energies = np.einsum("ik,ik->k", modes, A @ modes)
        assert np.max(np.abs(energies)) < 1e-12 * matrix_scale(A)

    def test_symmetric(self, tilted_band, soft_membrane):
        _, _, system = membrane_system(tilted_band, soft_membrane, tau0=1.0)
        assert system.symmetry_error() <= 1e-12


# =============================================================================
# Positive semidefiniteness of each operator
# =============================================================================


def membrane_only(band):
    dofs = DofMap.for_band(band)
    system = SparseSystem(dofs)
    assemble_membrane(extract_surface(band), MembraneMaterial(E=3.0, nu=0.4, t=0.5), dofs, system)
    return system


def stabilization_only(band):
    dofs = DofMap.for_band(band)
    system = SparseSystem(dofs)
    assemble_stabilization(band, StabilizationParams(0.5), dofs, system)
    return system


def bulk_only(band):
    dofs = DofMap.for_mesh(band.mesh)
    system = SparseSystem(dofs)
    assemble_bulk(band.mesh, BulkMaterial(E=2.0, nu=0.45), dofs, system)
    return system


@pytest.mark.parametrize("build", [membrane_only, stabilization_only, bulk_only],
                         ids=["membrane", "stabilization", "bulk"])
def test_positive_semidefinite(build, tilted_band, rng):
    system = build(tilted_band)
    assert system.matrix.nnz > 0
    scale = matrix_scale(system.matrix)
    for _ in range(200):
        v = rng.normal(size=system.dofs.n_dofs)
        assert system.energy(v) >= -1e-12 * scale * (v @ v)


# =============================================================================
# Stabilization
# =============================================================================


class TestAssembleStabilization:
    @pytest.fixture
    def diagonal_cut(self, unit_tets):
        """Plane x + y + z = 1.5: every one of the six tets is cut."""
        return classify(discretize(PlaneLevelSet(normal=(1.0, 1.0, 1.0), offset=1.5 / np.sqrt(3.0)), unit_tets))

    def test_all_tets_active(self, diagonal_cut):
        assert len(diagonal_cut.cells) == 6
        assert len(diagonal_cut.faces) == 6

    def test_linear_field_has_no_jump(self, tilted_band):
        dofs = DofMap.for_band(tilted_band)
        system = SparseSystem(dofs)
        assemble_stabilization(tilted_band, StabilizationParams(1.0), dofs, system)
        coords = dofs.coordinates
        v = (coords @ np.array([[0.2, -1.0, 0.5], [0.4, 0.1, -0.3], [1.1, 0.0, 0.6]])).reshape(-1)
        assert abs(system.energy(v)) < 1e-12 * matrix_scale(system.matrix) * (v @ v)

    def test_zero_tau_adds_nothing(self, tilted_band):
        dofs = DofMap.for_band(tilted_band)
        system = SparseSystem(dofs)
        assemble_stabilization(tilted_band, StabilizationParams(0.0), dofs, system)
        assert system.matrix.nnz == 0

    def test_linear_in_tau(self, tilted_band):
        dofs = DofMap.for_band(tilted_band)
        one, two = SparseSystem(dofs), SparseSystem(dofs)
        assemble_stabilization(tilted_band, StabilizationParams(1.0), dofs, one)
        assemble_stabilization(tilted_band, StabilizationParams(2.0), dofs, two)
        assert abs(two.matrix - 2.0 * one.matrix).max() <= 1e-14 * abs(two.matrix).max()

    def test_hat_function_jump(self, diagonal_cut):
        """Energy of one hat function equals the sum of tau0 A (n . [grad N])^2 over the faces."""
        mesh = diagonal_cut.mesh
        dofs = DofMap.for_band(diagonal_cut)
        system = SparseSystem(dofs)
        assemble_stabilization(diagonal_cut, StabilizationParams(2.5), dofs, system)

        node = 1
        expected = 0.0
        for face, normal in zip(diagonal_cut.faces, diagonal_cut.face_normals):
            jump = np.zeros(3)
            for side, sign in ((0, 1.0), (1, -1.0)):
                cell = mesh.face_cells[face, side]
                nodes = mesh.cells[cell].tolist()
                if node in nodes:
                    _, grads, _ = mesh.basis.physical_gradients(mesh.cell_coordinates([cell]), np.full(3, 0.25))
                    jump += sign * grads[0, nodes.index(node)]
            tri = mesh.vertices[mesh.face_vertices[face]]
            area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
            expected += 2.5 * area * (normal @ jump) ** 2

        v = np.zeros(dofs.n_dofs)
        v[3 * dofs.node_to_local[node] + 2] = 1.0
        assert expected > 0
        assert system.energy(v) == pytest.approx(expected, rel=1e-12)


# =============================================================================
# Loads
# =============================================================================


class TestAssembleMembraneLoad:
    def test_no_load(self, flat_cube_band):
        surface = extract_surface(flat_cube_band)
        dofs = DofMap.for_band(flat_cube_band)
        system = SparseSystem(dofs)
        assemble_membrane_load(surface, LoadField(), dofs, system)
        assert not np.any(system.rhs)

    def test_constant_load_resultant(self, flat_cube_band):
        surface = extract_surface(flat_cube_band)
        dofs = DofMap.for_band(flat_cube_band)
        system = SparseSystem(dofs)
        assemble_membrane_load(surface, LoadField(surface=lambda x: np.tile([1.0, 0.0, 0.0], (len(x), 1))), dofs, system)
        assert system.rhs[0::3].sum() == pytest.approx(1.0, rel=1e-12)
        assert np.allclose(system.rhs[1::3], 0.0)

    def test_cylinder_axial_resultant(self):
        mesh = build_structured(((0.0, -1.2, -1.2), (4.0, 1.2, 1.2)), 20, 12, 12)
        active = classify(discretize(CylinderLevelSet(center=(0.0, 0.0), radius=1.0, axis="x"), mesh))
        surface = extract_surface(active)
        dofs = DofMap.for_band(active)
        system = SparseSystem(dofs)
        assemble_membrane_load(surface, LoadField(surface=lambda x: cylinder_load(x, 1.0, 1.0, 4.0)), dofs, system)
        assert system.rhs[0::3].sum() == pytest.approx(0.5, rel=0.05)


# =============================================================================
# Bulk, coupling and constraints
# =============================================================================


class TestAssembleBulk:
    @pytest.mark.parametrize("kind", ["tet4", "hex8"])
    def test_uniaxial_stretch_energy(self, kind, rubber):
        mesh = build_structured(((0, 0, 0), (1, 1, 1)), 1, 1, 1, kind)
        dofs = DofMap.for_mesh(mesh)
        system = SparseSystem(dofs)
        assemble_bulk(mesh, rubber, dofs, system)
        assert system.energy(dofs.interpolate(stretch_x)) == pytest.approx(2 * rubber.mu + rubber.lam, rel=1e-12)

    @pytest.mark.parametrize("kind", ["tet4", "hex8"])
    def test_rigid_modes_in_kernel(self, kind, rubber):
        mesh = build_structured(((0, 0, 0), (2, 1, 1)), 3, 2, 2, kind)
        dofs = DofMap.for_mesh(mesh)
        system = SparseSystem(dofs)
        assemble_bulk(mesh, rubber, dofs, system)
        A = system.matrix
        modes = rigid_body_modes(dofs)
        assert np.max(np.abs(np.einsum("ik,ik->k", modes, A @ modes))) < 1e-12 * matrix_scale(A)
        assert system.symmetry_error() <= 1e-12

    def test_body_force_resultant(self, rubber):
        mesh = build_structured(((0, 0, 0), (2, 1, 1)), 2, 2, 2, "hex8")
        dofs = DofMap.for_mesh(mesh)
        system = SparseSystem(dofs)
        assemble_bulk(mesh, rubber, dofs, system, body_force=lambda x: np.tile([0.0, 0.0, -1.0], (len(x), 1)))
        assert system.rhs[2::3].sum() == pytest.approx(-2.0, rel=1e-12)


class TestCouple:
    @pytest.fixture
    def bulk_setup(self, rubber):
        mesh = build_structured(((0, 0, 0), (1, 1, 1)), 2, 2, 2, "tet4")
        dofs = DofMap.for_mesh(mesh)
        bulk = SparseSystem(dofs)
        assemble_bulk(mesh, rubber, dofs, bulk)
        active = classify(discretize(PlaneLevelSet(offset=0.3), mesh))
        return mesh, dofs, bulk, active

    def membrane_part(self, setup, E):
        _, dofs, _, active = setup
        part = SparseSystem(dofs)
        assemble_membrane(extract_surface(active), MembraneMaterial(E=E, nu=0.3, t=0.1), dofs, part)
        return part

    def test_no_membranes(self, bulk_setup):
        _, _, bulk, _ = bulk_setup
        assert abs(couple(bulk, []).matrix - bulk.matrix).max() == 0.0

    def test_null_membrane(self, bulk_setup):
        _, _, bulk, _ = bulk_setup
        coupled = couple(bulk, [self.membrane_part(bulk_setup, 0.0)])
        assert abs(coupled.matrix - bulk.matrix).max() == 0.0

    def test_membrane_adds_stiffness(self, bulk_setup, rng):
        _, dofs, bulk, _ = bulk_setup
        coupled = couple(bulk, [self.membrane_part(bulk_setup, 10.0)])
        for _ in range(10):
            v = rng.normal(size=dofs.n_dofs)
            assert coupled.energy(v) >= bulk.energy(v) - 1e-12 * abs(bulk.energy(v))
        assert coupled.energy(dofs.interpolate(stretch_x)) > bulk.energy(dofs.interpolate(stretch_x))

    def test_different_dof_map(self, bulk_setup):
        _, _, bulk, active = bulk_setup
        with pytest.raises(ContractViolation):
            couple(bulk, [SparseSystem(DofMap.for_band(active))])


class TestApplyDirichlet:
    @pytest.fixture
    def bulk_cube(self, rubber):
        mesh = build_structured(((0, 0, 0), (1, 1, 1)), 2, 2, 2, "hex8")
        return mesh, rubber

    def assemble(self, mesh, mat, dirichlet=()):
        dofs = DofMap.for_mesh(mesh, dirichlet)
        system = SparseSystem(dofs)
        assemble_bulk(mesh, mat, dofs, system)
        system.rhs[:] = 1.0
        return system

    def test_no_constraints(self, bulk_cube):
        system = self.assemble(*bulk_cube)
        reduced = apply_dirichlet(system)
        assert abs(reduced.matrix - system.matrix).max() == 0.0
        assert np.array_equal(reduced.rhs, system.rhs)

    def test_box_boundary_selection(self, bulk_cube):
        mesh, mat = bulk_cube
        system = self.assemble(mesh, mat, [dirichlet_nodes(mesh, BoxSelector((0, 0, 0), (1, 1, 1)))])
        # only the centre node of a 2x2x2 mesh is off the box boundary
        assert len(system.dofs.constrained) == system.dofs.n_dofs - 3

    def test_everything_constrained(self, bulk_cube):
        mesh, mat = bulk_cube
        everything = DirichletSet(tag="all", nodes=np.arange(mesh.n_vertices), components=("x", "y", "z"))
        reduced = apply_dirichlet(self.assemble(mesh, mat, [everything]))
        assert abs(reduced.matrix - sp.identity(reduced.dofs.n_dofs)).max() == 0.0
        assert not np.any(reduced.rhs)
        assert not np.any(solve_direct(reduced).x)

    def test_clamp_removes_rigid_kernel(self, bulk_cube):
        mesh, mat = bulk_cube
        clamp = dirichlet_nodes(mesh, PlaneSelector("x", 0.0))
        reduced = apply_dirichlet(self.assemble(mesh, mat, [clamp]))
        assert np.linalg.eigvalsh(reduced.matrix.toarray()).min() > 1e-8
        assert reduced.symmetry_error() <= 1e-12

    def test_prescribed_values(self, bulk_cube):
        mesh, mat = bulk_cube
        clamp = dirichlet_nodes(mesh, PlaneSelector("x", 0.0))
        system = self.assemble(mesh, mat, [clamp])
        values = np.full(system.dofs.n_dofs, 0.25)
        report = solve_direct(apply_dirichlet(system, values=values))
        assert np.allclose(report.x[system.dofs.constrained], 0.25)

    def test_rigid_modes_orthonormal(self, bulk_cube):
        mesh, _ = bulk_cube
        modes = rigid_body_modes(DofMap.for_mesh(mesh))
        assert modes.shape == (3 * mesh.n_vertices, 6)
        assert np.allclose(modes.T @ modes, np.eye(6), atol=1e-12)


# =============================================================================
# Linear reproduction
# =============================================================================


class TestLinearReproduction:
    """A flat membrane with linear boundary data reproduces the linear field exactly."""

    GRADIENT = np.array([[0.3, -0.1, 0.2], [0.05, 0.4, -0.25], [0.1, 0.2, 0.15]])
    SHIFT = np.array([0.01, -0.02, 0.03])

    def linear_field(self, points):
        return points @ self.GRADIENT.T + self.SHIFT

    def test_tilted_plane(self):
        mesh = build_structured(((0, 0, 0), (1, 1, 1)), 4, 4, 4, "tet4")
        active = classify(discretize(PlaneLevelSet(normal=(0.2, 0.1, 1.0), offset=0.45), mesh))
        sides = [("x", 0.0), ("x", 1.0), ("y", 0.0), ("y", 1.0)]
        constraints = [dirichlet_nodes(active, PlaneSelector(axis, value), tag=f"{axis}{value:g}") for axis, value in sides]
        material = MembraneMaterial(E=2.0, nu=0.3, t=0.1)
        surface, dofs, system = membrane_system(active, material, tau0=1.0, dirichlet=constraints)

        exact = dofs.interpolate(self.linear_field)
        report = solve_direct(apply_dirichlet(system, dofs, values=exact))
        assert np.allclose(report.x, exact, atol=1e-10)

        stress = recover_stress(SolutionField(dofs, report.x), surface, material)
        P = projector(surface.qp_normals)
        J = np.broadcast_to(self.GRADIENT, P.shape)
        expected = membrane_stress(surface_strain(J, P), P, material.mu, material.lam)
        error = stress_error_L2(stress, expected, surface)
        assert error < 1e-9 * stress_norm_L2(expected, surface)
