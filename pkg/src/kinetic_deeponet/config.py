"""INI run configuration with defaults, validation and seed substreams."""

from __future__ import annotations

import configparser
import hashlib
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collision import HENYEY_GREENSTEIN, ISOTROPIC, KernelSpec
from .deeponet import DEFAULT_WIDTHS, Variant
from .quadrature import SLAB, SPHERE, VelocityGrid, grid_from_spec


class ConfigError(ValueError):
    pass


def _opt_float(s):
    return None if s.strip() == "" else float(s)


def _opt_int(s):
    return None if s.strip() == "" else int(s)


def _int_tuple(s):
    return None if s.strip() == "" else tuple(int(x) for x in s.replace(",", " ").split())


def _str_list(s):
    return [x.strip() for x in s.split(",") if x.strip()]


# section -> key -> (parser, default text)
SCHEMA = {
    "grid": {
        "domain": (str, SLAB),
        "order": (int, "100"),
        "n_polar": (int, "20"),
        "n_azimuthal": (int, "40"),
    },
    "kernel": {
        "kind": (str, ISOTROPIC),
        "g": (float, "0.0"),
        "slab_truncation": (_opt_int, ""),
    },
    "sampler": {
        "degree": (int, "2"),
        "sigma": (float, "1.0"),
        "threshold_offset": (float, "2.0"),
        "entropy_threshold": (_opt_float, ""),
        "train_samples": (int, "10000"),
        "test_samples": (int, "2000"),
    },
    "model": {
        "variants": (_str_list, "bias_adaption"),
        "branch_widths": (_int_tuple, ""),
        "trunk_widths": (_int_tuple, ""),
        "p": (_opt_int, ""),
    },
    "train": {
        "epochs": (int, "10000"),
        "learning_rate": (float, "1e-3"),
        "beta1": (float, "0.9"),
        "beta2": (float, "0.999"),
        "eps": (float, "1e-8"),
        "penalty_weight": (float, "0.1"),
        "log_every": (int, "1000"),
    },
    "solver": {
        "cfl": (float, "0.4"),
        "t_final": (_opt_float, ""),
        "n_x": (_opt_int, ""),
        "sigma_s": (float, "1.0"),
        "inflow": (float, "0.5"),
        "geometry": (str, ""),
        "relax_steps": (int, "50"),
        "relax_dt": (_opt_float, ""),
        "basis_points": (int, "512"),
    },
    "io": {
        "out": (str, "results"),
        "seed": (int, "0"),
        "dataset": (str, ""),
        "test_dataset": (str, ""),
    },
}


@dataclass
class RunConfig:
    sections: dict
    source_text: str = ""
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def seed(self) -> int:
        return self.sections["io"]["seed"]

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.source_text.encode()).hexdigest()

    def velocity_grid(self) -> VelocityGrid:
        g = self.sections["grid"]
        if g["domain"] == SLAB:
            return grid_from_spec({"domain": SLAB, "order": g["order"]})
        return grid_from_spec({"domain": SPHERE, "n_polar": g["n_polar"], "n_azimuthal": g["n_azimuthal"]})

    def kernel(self) -> KernelSpec:
        k = self.sections["kernel"]
        return KernelSpec(k["kind"], k["g"], k["slab_truncation"])

    def widths(self) -> tuple:
        m = self.sections["model"]
        domain = self.sections["grid"]["domain"]
        branch, trunk = DEFAULT_WIDTHS[domain]
        branch = m["branch_widths"] or branch
        trunk = m["trunk_widths"] or trunk
        grid = self.velocity_grid()
        branch = (grid.size,) + tuple(branch[1:]) if not m["branch_widths"] else branch
        if m["p"] is not None:
            branch = tuple(branch[:-1]) + (m["p"],)
            trunk = tuple(trunk[:-1]) + (m["p"],)
        return tuple(branch), tuple(trunk)

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def substream_seed(seed: int, name: str) -> int:
    """Independent integer seed for a named component, derived from the run seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def parse_config_text(text: str, base_dir=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    sections = {}
    for name in parser.sections():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        for key in parser[name]:
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown key {name}.{key}")
    for name, keys in SCHEMA.items():
        values = {}
        for key, (conv, default) in keys.items():
            raw = parser.get(name, key, fallback=default) if parser.has_section(name) else default
            try:
                values[key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"invalid value for {name}.{key}: {raw!r}") from exc
        sections[name] = values
    cfg = RunConfig(sections, text, Path(base_dir) if base_dir else Path.cwd())
    validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config_text(path.read_text(), base_dir=path.parent)


def validate(cfg: RunConfig) -> None:
    g, k, s, m, t, sv = (cfg[n] for n in ("grid", "kernel", "sampler", "model", "train", "solver"))
    if g["domain"] not in (SLAB, SPHERE):
        raise ConfigError(f"grid.domain must be {SLAB!r} or {SPHERE!r}")
    if g["order"] < 1 or g["n_polar"] < 1 or g["n_azimuthal"] < 2:
        raise ConfigError("grid.order >= 1, grid.n_polar >= 1 and grid.n_azimuthal >= 2 required")
    if k["kind"] not in (ISOTROPIC, HENYEY_GREENSTEIN):
        raise ConfigError(f"kernel.kind must be {ISOTROPIC!r} or {HENYEY_GREENSTEIN!r}")
    if not -1.0 <= k["g"] <= 1.0:
        raise ConfigError(f"kernel.g = {k['g']} outside [-1, 1]")
    if k["slab_truncation"] is not None:
        if g["domain"] == SPHERE:
            raise ConfigError("kernel.slab_truncation is a slab kernel setting but grid.domain is sphere")
        if k["slab_truncation"] < 1:
            raise ConfigError("kernel.slab_truncation must be >= 1")
    if s["degree"] < 0 or s["sigma"] <= 0:
        raise ConfigError("sampler.degree >= 0 and sampler.sigma > 0 required")
    if s["train_samples"] < 1 or s["test_samples"] < 1:
        raise ConfigError("sampler.train_samples and sampler.test_samples must be >= 1")
    for v in m["variants"]:
        try:
            Variant(v)
        except ValueError:
            raise ConfigError(f"model.variants: unknown variant {v!r}") from None
    if not m["variants"]:
        raise ConfigError("model.variants is empty")
    branch, trunk = cfg.widths()
    grid = cfg.velocity_grid()
    if branch[0] != grid.size:
        raise ConfigError(f"model.branch_widths input {branch[0]} != number of sensors {grid.size}")
    if trunk[0] != grid.dim:
        raise ConfigError(f"model.trunk_widths input {trunk[0]} != velocity dimension {grid.dim}")
    if branch[-1] != trunk[-1]:
        raise ConfigError("model.branch_widths and model.trunk_widths end in different p")
    if len(branch) < 2 or len(trunk) < 2 or min(branch + trunk) < 1:
        raise ConfigError("model widths must list at least two positive layers")
    if t["epochs"] < 1 or t["learning_rate"] < 0 or t["penalty_weight"] < 0:
        raise ConfigError("train.epochs >= 1 and non-negative train.learning_rate, train.penalty_weight required")
    if not 0.0 < sv["cfl"] <= 1.0:
        raise ConfigError("solver.cfl must lie in (0, 1]")
    if sv["n_x"] is not None and sv["n_x"] < 1:
        raise ConfigError("solver.n_x must be >= 1")
    if sv["relax_steps"] < 1 or sv["basis_points"] < 2:
        raise ConfigError("solver.relax_steps >= 1 and solver.basis_points >= 2 required")


def read_geometry(path) -> list:
    """Rectangles (x0, y0, x1, y1, sigma_a, sigma_s, p), one CSV line each."""
    rects = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("x0"):
            continue
        parts = [float(x) for x in line.split(",")]
        if len(parts) != 7:
            raise ConfigError(f"{path}:{lineno}: expected 7 values, got {len(parts)}")
        if min(parts[4:]) < 0:
            raise ConfigError(f"{path}:{lineno}: negative material value")
        rects.append(tuple(parts))
    return rects
