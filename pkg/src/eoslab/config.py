"""Experiment configuration: an INI file with one section per concern.

Example::

    [experiment]
    seed = 0

    [loss]
    kind = toy            ; toy | quadratic | mlp
    x0 = 1, 0.3

    [optimizer]
    kind = ngd            ; gd | ngd | sqrt
    eta = 0.02
    steps = 2000

    [diagnostics]
    every = 100

Unknown keys are rejected so that typos do not pass silently. All errors
carry the line number of the offending entry.
"""

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .limiting_flow import DEFAULT_COEFFICIENT, ProjectionConfig
from .optimizers import KINDS, DiagConfig, NoiseSchedule

SCHEMA = {
    "experiment": {"seed", "name"},
    "loss": {"kind", "eigenvalues", "matrix", "x0", "widths", "activation", "samples",
             "data_seed", "init_seed", "init_scale", "pretrain_loss", "pretrain_max_steps"},
    "optimizer": {"kind", "eta", "steps", "noise", "t_freq", "radius", "noise_seed"},
    "diagnostics": {"every", "k", "rank", "stableness", "grid_n", "phi_tol", "phi_max_flow_time",
                    "phi_max_step_factor", "spectral_tol"},
    "flow": {"kind", "eta_flow", "tau_end", "coefficient", "method", "eta_proj", "t_proj",
             "tol_manifold", "record_every"},
    "compare": {"c_time", "flow_coefficient", "samples", "reference", "max_distance"},
    "output": {"dir", "prefix"},
    "quadratic": {"seeds", "dim", "steps", "bound"},
}


@dataclass
class LossSpec:
    kind: str = "toy"
    eigenvalues: Optional[list] = None
    matrix: Optional[list] = None
    x0: Optional[list] = None
    widths: list = field(default_factory=lambda: [2, 8, 1])
    activation: str = "tanh"
    samples: int = 16
    data_seed: int = 0
    init_seed: Optional[int] = None
    init_scale: float = 1.0
    pretrain_loss: Optional[float] = None
    pretrain_max_steps: int = 200_000


@dataclass
class FlowSpec:
    kind: str = "log_flow"
    eta_flow: float = 1e-3
    tau_end: float = 1.0
    coefficient: Optional[float] = None
    record_every: int = 1
    proj: ProjectionConfig = field(default_factory=ProjectionConfig)


@dataclass
class CompareSpec:
    c_time: Optional[float] = None
    flow_coefficient: float = 1.0
    samples: int = 41
    reference: str = "integrator"     # integrator | closed_form (toy loss only)
    max_distance: Optional[float] = None


@dataclass
class QuadraticSpec:
    seeds: int = 100
    dim: int = 5
    steps: int = 2000
    bound: str = "tight"


@dataclass
class ExperimentConfig:
    seed: int = 0
    name: str = "experiment"
    loss: LossSpec = field(default_factory=LossSpec)
    optimizer: str = "ngd"
    eta: float = 0.02
    steps: int = 1000
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    diag: DiagConfig = field(default_factory=DiagConfig)
    flow: FlowSpec = field(default_factory=FlowSpec)
    compare: CompareSpec = field(default_factory=CompareSpec)
    quadratic: QuadraticSpec = field(default_factory=QuadraticSpec)
    out_dir: str = "out"
    prefix: str = ""
    source: str = ""

    @property
    def r_columns(self):
        """Number of ``R_j`` columns in trace files."""
        return self.diag.rank if self.diag.rank else self.diag.k


def _line_index(text):
    """``(section, key) -> line number`` by a light scan of the raw text."""
    index = {}
    section = None
    head = re.compile(r"^\s*\[([^\]]+)\]")
    entry = re.compile(r"^\s*([^=:\s;#][^=:]*?)\s*[=:]")
    for no, line in enumerate(text.splitlines(), start=1):
        m = head.match(line)
        if m:
            section = m.group(1).strip()
            index[(section, None)] = no
            continue
        m = entry.match(line)
        if m and section is not None:
            index[(section, m.group(1).strip().lower())] = no
    return index


class _Reader:
    def __init__(self, parser, lines):
        self.parser = parser
        self.lines = lines

    def line(self, section, key=None):
        return self.lines.get((section, key), self.lines.get((section, None)))

    def fail(self, section, key, msg):
        raise ConfigError(f"[{section}] {key}: {msg}", self.line(section, key))

    def has(self, section, key):
        return self.parser.has_option(section, key)

    def raw(self, section, key):
        return self.parser.get(section, key).strip()

    def get(self, section, key, conv, default=None):
        if not self.has(section, key):
            return default
        text = self.raw(section, key)
        try:
            return conv(text)
        except (ValueError, TypeError) as exc:
            self.fail(section, key, f"cannot parse {text!r} ({exc})")

    def boolean(self, section, key, default=False):
        if not self.has(section, key):
            return default
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            self.fail(section, key, f"expected a boolean, got {self.raw(section, key)!r}")


def _floats(text):
    vals = [float(v) for v in re.split(r"[,\s]+", text.strip()) if v]
    if not vals:
        raise ValueError("empty list")
    return vals


def _ints(text):
    return [int(v) for v in _floats(text)]


def _matrix(text):
    rows = [r for r in text.split(";") if r.strip()]
    return [_floats(r) for r in rows]


def _opt_float(text):
    return None if text.lower() in ("", "none", "auto") else float(text)


def _opt_int(text):
    return None if text.lower() in ("", "none", "auto") else int(text)


def parse_config(text, source="<string>"):
    """Parse INI text into an ``ExperimentConfig``; raises ``ConfigError`` with line info."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        if lineno is None and getattr(exc, "errors", None):
            lineno = exc.errors[0][0]
        raise ConfigError(f"{source}: {exc.message if hasattr(exc, 'message') else exc}", lineno) from None
    rd = _Reader(parser, _line_index(text))

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", rd.line(section))
        for key in parser.options(section):
            if key not in SCHEMA[section]:
                rd.fail(section, key, "unknown key")

    cfg = ExperimentConfig(source=source)
    cfg.seed = rd.get("experiment", "seed", int, 0)
    cfg.name = rd.get("experiment", "name", str, "experiment")

    ls = cfg.loss
    ls.kind = rd.get("loss", "kind", str, "toy").lower()
    if ls.kind not in ("toy", "quadratic", "mlp"):
        rd.fail("loss", "kind", f"unknown loss kind {ls.kind!r}")
    ls.eigenvalues = rd.get("loss", "eigenvalues", _floats)
    ls.matrix = rd.get("loss", "matrix", _matrix)
    ls.x0 = rd.get("loss", "x0", _floats)
    ls.widths = rd.get("loss", "widths", _ints, [2, 8, 1])
    ls.activation = rd.get("loss", "activation", str, "tanh")
    ls.samples = rd.get("loss", "samples", int, 16)
    ls.data_seed = rd.get("loss", "data_seed", int, cfg.seed)
    ls.init_seed = rd.get("loss", "init_seed", int, cfg.seed)
    ls.init_scale = rd.get("loss", "init_scale", float, 1.0)
    ls.pretrain_loss = rd.get("loss", "pretrain_loss", _opt_float)
    ls.pretrain_max_steps = rd.get("loss", "pretrain_max_steps", int, 200_000)
    if ls.kind == "quadratic" and ls.eigenvalues is None and ls.matrix is None:
        rd.fail("loss", "kind", "quadratic loss needs 'eigenvalues' or 'matrix'")

    cfg.optimizer = rd.get("optimizer", "kind", str, "ngd").lower()
    if cfg.optimizer not in KINDS:
        rd.fail("optimizer", "kind", f"unknown optimizer {cfg.optimizer!r}; expected one of {KINDS}")
    cfg.eta = rd.get("optimizer", "eta", float, 0.02)
    if not cfg.eta > 0:
        rd.fail("optimizer", "eta", "eta must be positive")
    cfg.steps = rd.get("optimizer", "steps", int, 1000)
    if cfg.steps < 1:
        rd.fail("optimizer", "steps", "steps must be >= 1")
    cfg.noise = NoiseSchedule(
        enabled=rd.boolean("optimizer", "noise", False),
        t_freq=rd.get("optimizer", "t_freq", _opt_int),
        radius=rd.get("optimizer", "radius", _opt_float),
        seed=rd.get("optimizer", "noise_seed", int, cfg.seed),
    )
    if cfg.noise.t_freq is not None and cfg.noise.t_freq < 1:
        rd.fail("optimizer", "t_freq", "t_freq must be >= 1")

    d = DiagConfig()
    d.every = rd.get("diagnostics", "every", int, 0)
    if d.every < 0:
        rd.fail("diagnostics", "every", "cadence must be >= 0 (0 disables)")
    d.k = rd.get("diagnostics", "k", int, 2)
    if d.k < 1:
        rd.fail("diagnostics", "k", "k must be >= 1")
    d.rank = rd.get("diagnostics", "rank", _opt_int)
    d.stableness = rd.boolean("diagnostics", "stableness", False)
    d.grid_n = rd.get("diagnostics", "grid_n", int, 16)
    if d.grid_n < 1:
        rd.fail("diagnostics", "grid_n", "grid_n must be >= 1")
    d.phi_tol = rd.get("diagnostics", "phi_tol", _opt_float)
    d.phi_max_flow_time = rd.get("diagnostics", "phi_max_flow_time", float, 1e4)
    d.phi_max_step_factor = rd.get("diagnostics", "phi_max_step_factor", _opt_float)
    d.spectral_tol = rd.get("diagnostics", "spectral_tol", float, 1e-10)
    cfg.diag = d

    fl = cfg.flow
    fl.kind = rd.get("flow", "kind", str, "log_flow")
    if fl.kind not in DEFAULT_COEFFICIENT:
        rd.fail("flow", "kind", f"unknown flow kind {fl.kind!r}")
    fl.eta_flow = rd.get("flow", "eta_flow", float, 1e-3)
    if not fl.eta_flow > 0:
        rd.fail("flow", "eta_flow", "eta_flow must be positive")
    fl.tau_end = rd.get("flow", "tau_end", float, 1.0)
    fl.coefficient = rd.get("flow", "coefficient", _opt_float)
    fl.record_every = rd.get("flow", "record_every", int, 1)
    fl.proj = ProjectionConfig(
        method=rd.get("flow", "method", str, "auto"),
        eta_proj=rd.get("flow", "eta_proj", float, 1e-2),
        t_proj=rd.get("flow", "t_proj", int, 1000),
        tol_manifold=rd.get("flow", "tol_manifold", float, 1e-8),
    )
    if fl.proj.method not in ("auto", "hessian_eigvecs", "per_example_span"):
        rd.fail("flow", "method", f"unknown projection method {fl.proj.method!r}")

    cp = cfg.compare
    cp.c_time = rd.get("compare", "c_time", _opt_float)
    cp.flow_coefficient = rd.get("compare", "flow_coefficient", float, 1.0)
    cp.samples = rd.get("compare", "samples", int, 41)
    cp.reference = rd.get("compare", "reference", str, "integrator")
    if cp.reference not in ("integrator", "closed_form"):
        rd.fail("compare", "reference", f"unknown reference {cp.reference!r}")
    if cp.reference == "closed_form" and ls.kind != "toy":
        rd.fail("compare", "reference", "closed_form reference exists only for the toy loss")
    cp.max_distance = rd.get("compare", "max_distance", _opt_float)

    q = cfg.quadratic
    q.seeds = rd.get("quadratic", "seeds", int, 100)
    q.dim = rd.get("quadratic", "dim", int, 5)
    q.steps = rd.get("quadratic", "steps", int, 2000)
    q.bound = rd.get("quadratic", "bound", str, "tight")
    if q.bound not in ("tight", "conservative"):
        rd.fail("quadratic", "bound", "bound must be 'tight' or 'conservative'")

    cfg.out_dir = rd.get("output", "dir", str, "out")
    cfg.prefix = rd.get("output", "prefix", str, "")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def build_loss(spec):
    """``(model, x0)`` for a ``LossSpec``; MLP points are optionally GD-pretrained."""
    from .losses import mlp_regression_loss, quadratic_loss, synthetic_regression, toy_product_loss

    if spec.kind == "toy":
        model = toy_product_loss()
        x0 = np.array(spec.x0 if spec.x0 is not None else [1.0, 0.3])
    elif spec.kind == "quadratic":
        model = quadratic_loss(spec.matrix if spec.matrix is not None else spec.eigenvalues)
        x0 = np.array(spec.x0) if spec.x0 is not None else np.ones(model.dim)
    else:
        widths = spec.widths
        data = synthetic_regression(spec.samples, widths[0], widths[-1], spec.data_seed)
        model = mlp_regression_loss(widths, spec.activation, data)
        x0 = np.array(spec.x0) if spec.x0 is not None else model.init_params(spec.init_seed, spec.init_scale)
        if spec.pretrain_loss is not None:
            x0 = pretrain(model, x0, spec.pretrain_loss, spec.pretrain_max_steps)
    return model, model.check_point(x0)


def pretrain(model, x, target, max_steps, refresh=2000):
    """Plain GD with learning rate ``1 / lambda1`` (refreshed every ``refresh`` steps) until ``L <= target``."""
    from .spectral import top_eigenpairs

    steps = 0
    lr = None
    while model.value(x) > target:
        if steps >= max_steps:
            raise ConfigError(f"pretraining did not reach loss {target:g} in {max_steps} steps")
        if steps % refresh == 0:
            lr = 1.0 / max(top_eigenpairs(model, x, tol=1e-6).lambda1, 1e-12)
        x = x - lr * model.gradient(x)
        steps += 1
    return x
