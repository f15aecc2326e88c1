import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from assembly import BulkMaterial, MembraneMaterial
from level_set import LevelSet, PlaneSelector, make_level_set

CONFIG_DIR = Path(__file__).resolve().parent / "configs"

BenchmarkId = Literal["cylinder", "oblate", "stiffened-beam", "bending-beam", "conditioning-sweep"]
AxisName = Literal["x", "y", "z"]


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MeshSettings(_Settings):
    kind: Literal["tet4", "hex8"] = "tet4"
    box: Tuple[Tuple[float, float, float], Tuple[float, float, float]]
    refinements: List[Tuple[int, int, int]]
    jitter: float = Field(0.0, ge=0.0, lt=0.5)
    seed: int = 42

    @field_validator("refinements")
    @classmethod
    def _increasing(cls, refinements):
        if not refinements:
            raise ValueError("At least one refinement level is required")
        if any(n < 1 for level in refinements for n in level):
            raise ValueError("Subdivision counts must be at least 1")
        sizes = [level[0] * level[1] * level[2] for level in refinements]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("Refinement list must be strictly increasing in resolution")
        return refinements

    @model_validator(mode="after")
    def _box(self):
        if any(hi <= lo for lo, hi in zip(*self.box)):
            raise ValueError(f"Degenerate mesh box {self.box}")
        return self


class LevelSetSettings(_Settings):
    kind: Literal["cylinder", "oblate", "plane", "sphere"]
    center: Optional[List[float]] = None
    radius: Optional[float] = None
    axis: AxisName = "z"
    normal: Optional[List[float]] = None
    offset: Optional[float] = None
    shift: Optional[List[float]] = None

    def build(self) -> LevelSet:
        return make_level_set(
            self.kind,
            center=self.center,
            radius=self.radius,
            axis=self.axis,
            normal=self.normal,
            offset=self.offset,
            shift=self.shift,
        )


class MaterialSettings(_Settings):
    E: float = Field(ge=0.0)
    nu: float
    t: float = Field(1.0, gt=0.0)

    def membrane(self) -> MembraneMaterial:
        return MembraneMaterial(E=self.E, nu=self.nu, t=self.t)

    def bulk(self) -> BulkMaterial:
        return BulkMaterial(E=self.E, nu=self.nu)


class StabilizationSettings(_Settings):
    tau0: float = Field(1.0, ge=0.0)


class SolverSettings(_Settings):
    method: Literal["cg", "direct"] = "cg"
    tol: float = Field(1e-10, gt=0.0)
    max_iter: Optional[int] = Field(None, ge=1)


class OutputSettings(_Settings):
    vtk: bool = True
    csv: bool = True
    json_log: bool = True


class DirichletSettings(_Settings):
    """Nodes on the plane ``axis = value`` with the listed components fixed."""

    axis: AxisName
    value: float
    components: List[AxisName] = ["x", "y", "z"]
    tag: Optional[str] = None

    def selector(self) -> PlaneSelector:
        return PlaneSelector(self.axis, self.value)

    @property
    def name(self) -> str:
        return self.tag or f"{self.axis}={self.value:g}:{''.join(self.components)}"


class CylinderSettings(_Settings):
    F: float = 1.0
    r: float = Field(1.0, gt=0.0)
    L: float = Field(4.0, gt=0.0)


class MembraneSettings(_Settings):
    name: str
    levelset: LevelSetSettings
    material: MaterialSettings


class BeamSettings(_Settings):
    bulk: MaterialSettings
    requested_nu: Optional[float] = None
    clamp: DirichletSettings
    load_face: DirichletSettings
    traction: Tuple[float, float, float]
    membranes: List[MembraneSettings] = []
    membrane_tau0: float = Field(0.0, ge=0.0)


class SweepSettings(_Settings):
    variant: Literal["plane", "sphere"] = "plane"
    offsets: List[float]
    tau0_values: List[float] = [1.0, 0.0]
    node_coordinate: float = 0.5
    sphere_radius: float = 0.375
    condition_iters: int = Field(200, ge=1)

    @field_validator("offsets")
    @classmethod
    def _positive(cls, offsets):
        if not offsets or any(d <= 0 for d in offsets):
            raise ValueError("Sweep offsets must be positive fractions of the mesh spacing")
        return offsets


class BenchmarkConfig(_Settings):
    """
    Full description of one study. Nested sections validate themselves; the
    cross-section rules live in ``_consistent``.
    """

    benchmark: BenchmarkId
    name: str
    description: str = ""
    mode: Literal["membrane", "coupled"] = "membrane"
    mesh: MeshSettings
    levelset: Optional[LevelSetSettings] = None
    material: MaterialSettings = MaterialSettings(E=1.0, nu=0.5, t=1.0)
    stabilization: StabilizationSettings = StabilizationSettings()
    solver: SolverSettings = SolverSettings()
    output: OutputSettings = OutputSettings()
    quadrature: Literal["auto", "centroid", "3-point"] = "auto"
    dirichlet: List[DirichletSettings] = []
    cylinder: Optional[CylinderSettings] = None
    beam: Optional[BeamSettings] = None
    sweep: Optional[SweepSettings] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.benchmark in ("cylinder", "oblate"):
            if self.levelset is None:
                raise ValueError(f"Benchmark '{self.benchmark}' needs a levelset section")
            if self.mode != "membrane":
                raise ValueError(f"Benchmark '{self.benchmark}' runs in membrane mode")
            if self.stabilization.tau0 == 0.0:
                raise ValueError("tau0 = 0 is only allowed in coupled mode")
        if self.benchmark == "cylinder" and self.cylinder is None:
            raise ValueError("Benchmark 'cylinder' needs a cylinder section")
        if self.benchmark in ("stiffened-beam", "bending-beam"):
            if self.beam is None:
                raise ValueError(f"Benchmark '{self.benchmark}' needs a beam section")
            if self.mode != "coupled":
                raise ValueError(f"Benchmark '{self.benchmark}' runs in coupled mode")
        if self.benchmark == "conditioning-sweep" and self.sweep is None:
            raise ValueError("Benchmark 'conditioning-sweep' needs a sweep section")
        return self

    def deviations(self) -> List[str]:
        """Documented departures from the nominal problem data."""
        notes = []
        if self.beam is not None and self.beam.requested_nu is not None and self.beam.requested_nu != self.beam.bulk.nu:
            notes.append(
                f"bulk Poisson ratio {self.beam.requested_nu} replaced by {self.beam.bulk.nu} "
                f"(3D lambda is infinite at 0.5)"
            )
        if self.mesh.jitter > 0:
            notes.append(f"unstructured mesh emulated by interior jitter {self.mesh.jitter} (seed {self.mesh.seed})")
        return notes


def _set_dotted(data: Dict[str, Any], key: str, value: Any):
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if node.get(part) is None:
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def apply_overrides(config: BenchmarkConfig, overrides: Dict[str, Any]) -> BenchmarkConfig:
    """
    Return a re-validated copy with dotted keys replaced.

    Args:
        config: Base configuration
        overrides: e.g. {"material.E": 200.0, "stabilization.tau0": 0.5}
    """
    data = config.model_dump()
    for key, value in overrides.items():
        _set_dotted(data, key, value)
    return BenchmarkConfig.model_validate(data)


def parse_override(text: str) -> Tuple[str, Any]:
    """Parse ``key=value``; the value is read as JSON when possible."""
    if "=" not in text:
        raise ValueError(f"Override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config_path(name_or_path: Union[str, Path]) -> Path:
    path = Path(name_or_path)
    if path.exists():
        return path
    candidate = CONFIG_DIR / path.name
    if candidate.suffix != ".json":
        candidate = candidate.with_suffix(".json")
    return candidate


def load_config(name_or_path: Union[str, Path]) -> BenchmarkConfig:
    """
    Load a configuration from a JSON file path or a bare name in configs/.

    Raises:
        FileNotFoundError: Neither the path nor configs/<name>.json exists
    """
    path = resolve_config_path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return BenchmarkConfig.model_validate(json.load(f))


def save_config(config: BenchmarkConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json", exclude_none=True), f, indent=2)
    return path


class RuntimeSettings(BaseModel):
    out_dir: str = "runs"
    log_level: str = "INFO"
    deterministic: bool = False

    @classmethod
    def from_env(cls) -> "RuntimeSettings":
        return cls(
            out_dir=os.environ.get("MEMBRANE_CUTFEM_OUT", "runs"),
            log_level=os.environ.get("MEMBRANE_CUTFEM_LOG_LEVEL", "INFO").upper(),
            deterministic=os.environ.get("MEMBRANE_CUTFEM_DETERMINISTIC", "0").strip().lower() in ("1", "true", "yes"),
        )


def _cylinder_refinements(spacings: List[float]) -> List[Tuple[int, int, int]]:
    return [(round(4.0 / d), round(2.4 / d), round(2.4 / d)) for d in spacings]


class BenchmarkTemplates:
    """Predefined benchmark configurations."""

    @staticmethod
    def create_cylinder_tet() -> BenchmarkConfig:
        return BenchmarkConfig(
            benchmark="cylinder",
            name="cylinder_tet",
            description="Pulled cylinder on a structured tetrahedral mesh",
            mesh=MeshSettings(kind="tet4", box=((0.0, -1.2, -1.2), (4.0, 1.2, 1.2)),
                              refinements=_cylinder_refinements([0.2, 0.1, 0.05])),
            levelset=LevelSetSettings(kind="cylinder", center=[0.0, 0.0], radius=1.0, axis="x"),
            material=MaterialSettings(E=100.0, nu=0.5, t=0.01),
            dirichlet=[
                DirichletSettings(axis="x", value=0.0, components=["x"], tag="axial"),
                DirichletSettings(axis="x", value=4.0, components=["y", "z"], tag="radial"),
            ],
            cylinder=CylinderSettings(F=1.0, r=1.0, L=4.0),
        )

    @staticmethod
    def create_cylinder_hex() -> BenchmarkConfig:
        config = BenchmarkTemplates.create_cylinder_tet()
        return apply_overrides(config, {
            "name": "cylinder_hex",
            "description": "Pulled cylinder on a structured hexahedral mesh",
            "mesh.kind": "hex8",
        })

    @staticmethod
    def create_cylinder_unstructured() -> BenchmarkConfig:
        config = BenchmarkTemplates.create_cylinder_tet()
        return apply_overrides(config, {
            "name": "cylinder_unstructured",
            "description": "Pulled cylinder on a jittered tetrahedral mesh",
            "mesh.jitter": 0.2,
            "mesh.seed": 42,
        })

    @staticmethod
    def create_oblate() -> BenchmarkConfig:
        return BenchmarkConfig(
            benchmark="oblate",
            name="oblate_tet",
            description="Oblate spheroid with manufactured solution u = (x, 0, 0)",
            mesh=MeshSettings(kind="tet4", box=((-1.2, -1.2, -0.72), (1.2, 1.2, 0.72)),
                              refinements=[(10, 10, 6), (20, 20, 12), (40, 40, 24)]),
            levelset=LevelSetSettings(kind="oblate"),
            material=MaterialSettings(E=1.0, nu=0.5, t=1.0),
        )

    @staticmethod
    def _beam(name: str, benchmark: str, traction, load_face: DirichletSettings,
              membranes: List[MembraneSettings]) -> BenchmarkConfig:
        return BenchmarkConfig(
            benchmark=benchmark,
            name=name,
            mode="coupled",
            mesh=MeshSettings(kind="tet4", box=((0.0, 0.0, 0.0), (2.0, 1.0, 1.0)), refinements=[(16, 8, 8)]),
            stabilization=StabilizationSettings(tau0=0.0),
            solver=SolverSettings(method="direct"),
            beam=BeamSettings(
                bulk=MaterialSettings(E=100.0, nu=0.499),
                requested_nu=0.5,
                clamp=DirichletSettings(axis="x", value=0.0, components=["x", "y", "z"], tag="clamp"),
                load_face=load_face,
                traction=traction,
                membranes=membranes,
            ),
        )

    @staticmethod
    def create_stiffened_beam() -> BenchmarkConfig:
        membranes = [
            MembraneSettings(
                name=f"plane_{k}",
                levelset=LevelSetSettings(kind="plane", normal=[0.0, 0.0, 1.0], offset=(2 * k + 1) / 16.0),
                material=MaterialSettings(E=1000.0, nu=0.5, t=0.01),
            )
            for k in range(8)
        ]
        config = BenchmarkTemplates._beam(
            "stiffened_beam", "stiffened-beam", (1.0, 0.0, 0.0),
            DirichletSettings(axis="x", value=2.0, components=["x"], tag="load"), membranes,
        )
        config.description = "Beam pulled at x = 2 with eight embedded plane membranes"
        return config

    @staticmethod
    def create_bending_beam() -> BenchmarkConfig:
        membranes = [
            MembraneSettings(
                name="cylinder",
                levelset=LevelSetSettings(kind="cylinder", center=[0.5, 0.5], radius=0.3, axis="x"),
                material=MaterialSettings(E=1000.0, nu=0.5, t=0.01),
            )
        ]
        config = BenchmarkTemplates._beam(
            "bending_beam", "bending-beam", (0.0, 0.0, -0.1),
            DirichletSettings(axis="z", value=1.0, components=["z"], tag="load"), membranes,
        )
        config.description = "Cantilever under a downward top-face traction with an embedded cylinder membrane"
        return config

    @staticmethod
    def create_conditioning_sweep() -> BenchmarkConfig:
        return BenchmarkConfig(
            benchmark="conditioning-sweep",
            name="conditioning_plane",
            description="Condition number against cut size with and without stabilization",
            mesh=MeshSettings(kind="tet4", box=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), refinements=[(6, 6, 6)]),
            levelset=LevelSetSettings(kind="plane", normal=[0.0, 0.0, 1.0], offset=0.5),
            material=MaterialSettings(E=1.0, nu=0.3, t=1.0),
            sweep=SweepSettings(variant="plane", offsets=[0.5, 1e-2, 1e-4, 1e-6, 1e-8], node_coordinate=0.5),
        )

    @staticmethod
    def create_conditioning_sphere() -> BenchmarkConfig:
        config = BenchmarkTemplates.create_conditioning_sweep()
        return apply_overrides(config, {
            "name": "conditioning_sphere",
            "mesh.refinements": [[8, 8, 8]],
            "levelset": {"kind": "sphere", "center": [0.5, 0.5, 0.5], "radius": 0.375},
            "sweep.variant": "sphere",
            "sweep.sphere_radius": 0.375,
        })


TEMPLATES = {
    "cylinder_tet": BenchmarkTemplates.create_cylinder_tet,
    "cylinder_hex": BenchmarkTemplates.create_cylinder_hex,
    "cylinder_unstructured": BenchmarkTemplates.create_cylinder_unstructured,
    "oblate_tet": BenchmarkTemplates.create_oblate,
    "stiffened_beam": BenchmarkTemplates.create_stiffened_beam,
    "bending_beam": BenchmarkTemplates.create_bending_beam,
    "conditioning_plane": BenchmarkTemplates.create_conditioning_sweep,
    "conditioning_sphere": BenchmarkTemplates.create_conditioning_sphere,
}
