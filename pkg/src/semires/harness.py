"""Experiment driver: configuration, staged pipeline, CSV artifacts, scaling classification."""
from __future__ import annotations

import csv
import dataclasses
import io
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .continuation import (
    cap_operator,
    disk_certificate,
    resolvent_norm,
)
from .gluing import gluing_csv, gluing_report
from .microlocal import (
    coherent_state,
    empty_at_order,
    fbi_transform,
    propagation_check,
    resolves_tails,
    trapping_probe,
)
from .operators import LayoutError, SupportLayout, make_grid, make_potential
from .resolvent import (
    Factorization,
    NormCurve,
    _check_sweep,
    loglog_curvature,
    measure_a,
    outgoing_operator,
    scaling_fit,
)

PRESETS: dict[str, dict] = {
    "nontrap": {"potential": "nontrap_bump", "E": 1.0},
    "barrier-top": {"potential": "barrier_top", "E": 1.0},
    "well": {"potential": "double_bump_well", "E": 2.0},
    "free": {"potential": "zero", "E": 1.0},
}

CLASSES = ("~1/h", "log-compatible", "h^-k", "out-of-hypothesis")


# ---------------------------------------------------------------------------
# configuration


def _parse_floats(text) -> tuple[float, ...]:
    if isinstance(text, str):
        return tuple(float(t) for t in text.replace(",", " ").split())
    return tuple(float(t) for t in text)


@dataclass(frozen=True)
class ExperimentConfig:
    potential: str = "nontrap_bump"
    E: float = 1.0
    R0: float = 1.0
    s: float = 1.0
    L: float = 13.0
    absorber_width: float = 4.0
    h_list: tuple[float, ...] = (0.1, 0.07, 0.05, 0.035, 0.025)
    points_per_h: float = 10.0
    stencil: int = 3
    tol: float = 1e-6
    C_max: float = 1024.0
    N_max: float = 3.0
    decay_order: float = 4.0
    out: str = "out"
    seed: int = 0
    stages: tuple[str, ...] = ("a_h", "gluing", "rw_bound", "certificate", "microlocal")

    def __post_init__(self):
        hs = self.h_list
        if any(a <= b for a, b in zip(hs, hs[1:])):
            raise ValueError("h_list must be strictly decreasing")
        if any(h <= 0 for h in hs):
            raise ValueError("h values must be positive")
        if self.stencil not in (3, 5):
            raise ValueError("stencil must be 3 or 5")
        if self.points_per_h < 5:
            raise ValueError("dx rule: need at least 5 points per h")
        if self.C_max < 1:
            raise ValueError("C_max must be >= 1")

    @property
    def layout(self) -> SupportLayout:
        return SupportLayout(R0=self.R0, s=self.s, absorber_width=self.absorber_width)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Build from string or typed values; ``preset`` expands first, other keys win."""
        values = dict(values)
        base = base if base is not None else cls()
        preset = values.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            base = dataclasses.replace(base, **PRESETS[preset])
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, val in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            if key in ("h_list",):
                kw[key] = _parse_floats(val)
            elif key == "stages":
                kw[key] = tuple(val.replace(",", " ").split()) if isinstance(val, str) else tuple(val)
            elif key in ("stencil", "seed"):
                kw[key] = int(val)
            elif key in ("potential", "out"):
                kw[key] = str(val)
            else:
                kw[key] = float(val)
        return dataclasses.replace(base, **kw)

    @classmethod
    def from_text(cls, text: str, overrides: Mapping[str, object] | None = None) -> "ExperimentConfig":
        """Flat ``key = value`` lines; ``#`` starts a comment. ``overrides`` win."""
        values = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"expected key = value, got {raw!r}")
            k, v = (t.strip() for t in line.split("=", 1))
            values[k] = v
        cfg = cls.from_mapping(values)
        return cls.from_mapping(overrides, cfg) if overrides else cfg

    @classmethod
    def from_file(cls, path, overrides: Mapping[str, object] | None = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), overrides)

    def to_text(self, include_out: bool = True) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "out" and not include_out:
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory excluded)."""
        return hashlib.sha256(self.to_text(include_out=False).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# scaling classification


class FitRow(NamedTuple):
    label: str
    exponent: float
    residual: float
    curvature: float
    growth: float  # relative growth of a(h) h from largest to smallest h
    classification: str
    detail: str


def classify_curve(
    h,
    y,
    label: str = "",
    N_max: float = 3.0,
    exponent_tol: float = 0.15,
    flat_tol: float = 0.03,
    rms_tol: float = 0.05,
) -> FitRow:
    """Place a norm profile in {~1/h, log-compatible, h^-k, out-of-hypothesis}.

    * ``~1/h``: exponent within ``exponent_tol`` of 1 and a(h) h flat to
      ``flat_tol``.
    * ``log-compatible``: a(h) h strictly increasing beyond ``flat_tol``,
      well described by alpha + beta log(1/h) with beta > 0, and an exponent
      no larger than log(1/h)/h can produce on this sweep. The log factor is
      not resolved as an exponent, only its direction.
    * ``h^-k``: a clean power law otherwise, k reported.
    * ``out-of-hypothesis``: exponent above N_max, non-finite data, or no
      model fits.
    """
    h = np.asarray(h, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(-h)
    h, y = h[order], y[order]
    _check_sweep(h, 5, 2.0)
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        return FitRow(label, np.nan, np.nan, np.nan, np.nan, "out-of-hypothesis", "non-finite values")
    fit = scaling_fit((h, y))
    curv = loglog_curvature(h, y)
    ah = y * h
    growth = float(ah[-1] / ah[0] - 1.0)
    p = fit.exponent
    if p > N_max:
        return FitRow(label, p, fit.residual, curv, growth, "out-of-hypothesis", f"exponent {p:.2f} > N = {N_max:g}")
    if abs(p - 1.0) <= exponent_tol and abs(growth) <= flat_tol and fit.residual <= rms_tol:
        return FitRow(label, p, fit.residual, curv, growth, "~1/h", f"exponent {p:.3f}")
    u = np.log(1.0 / h)
    beta, alpha = np.polyfit(u, ah, 1)
    model = alpha + beta * u
    log_ok = bool(np.all(model > 0))
    log_rms = float(np.sqrt(np.mean(np.log(ah / model) ** 2))) if log_ok else np.inf
    p_cap = 1.0 + 1.0 / u.min() + exponent_tol
    if np.all(np.diff(ah) > 0) and growth > flat_tol and beta > 0 and log_rms <= rms_tol and p <= p_cap:
        return FitRow(
            label, p, fit.residual, curv, growth, "log-compatible",
            f"a(h) h = {alpha:.3g} + {beta:.3g} log(1/h), rms {log_rms:.2g}",
        )
    if fit.residual <= rms_tol:
        return FitRow(label, p, fit.residual, curv, growth, "h^-k", f"k = {p:.2f} +- {max(0.1, 2 * fit.residual):.2f}")
    return FitRow(label, p, fit.residual, curv, growth, "out-of-hypothesis", "no model fits")


def fit_report(curves: Mapping[str, NormCurve | tuple], N_max: float = 3.0) -> list[FitRow]:
    rows = []
    for label, c in curves.items():
        h, y = (c.h, c.norms) if isinstance(c, NormCurve) else c
        rows.append(classify_curve(h, y, label, N_max))
    return rows


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def fit_report_csv(rows: Sequence[FitRow]) -> str:
    return _csv(
        ["label", "exponent", "residual", "curvature", "growth", "classification", "detail"],
        [
            [r.label, repr(float(r.exponent)), repr(float(r.residual)), repr(float(r.curvature)),
             repr(float(r.growth)), r.classification, r.detail]
            for r in rows
        ],
    )


# ---------------------------------------------------------------------------
# pipeline


class Claim(NamedTuple):
    stage: str
    claim: str
    value: float
    tolerance: str
    passed: bool


@dataclass
class StageResult:
    name: str
    status: str  # ok, failed, skipped
    seconds: float = 0.0
    message: str = ""


@dataclass
class RunReport:
    config: ExperimentConfig
    config_hash: str
    stages: dict[str, StageResult] = field(default_factory=dict)
    claims: list[Claim] = field(default_factory=list)
    a_curve: NormCurve | None = None
    fit: FitRow | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    certificate: object = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.claims) and all(s.status == "ok" for s in self.stages.values())

    def claims_csv(self) -> str:
        return _csv(
            ["stage", "claim", "value", "tolerance", "pass", "config_hash"],
            [[c.stage, c.claim, repr(float(c.value)), c.tolerance, int(c.passed), self.config_hash] for c in self.claims],
        )


DEPENDS = {
    "a_h": ("build",),
    "gluing": ("build",),
    "rw_bound": ("build", "a_h"),
    "certificate": ("build", "a_h"),
    "microlocal": ("build",),
}


def _with_hash(text: str, config_hash: str) -> str:
    lines = text.rstrip("\n").split("\n")
    out = [lines[0] + ",config_hash"] + [ln + "," + config_hash for ln in lines[1:]]
    return "\n".join(out) + "\n"


def _stage_build(cfg, rep, ctx):
    grid = make_grid(cfg.L, min(cfg.h_list) / cfg.points_per_h)
    cfg.layout.check(grid, cfg.stencil)
    ctx["V"] = make_potential(cfg.potential, R0=cfg.R0)


def _stage_a_h(cfg, rep, ctx):
    curve = measure_a(cfg.h_list, ctx["V"], cfg.E, cfg.layout, cfg.L, cfg.points_per_h, cfg.tol, label=cfg.potential)
    rep.a_curve = curve
    rep.fit = classify_curve(curve.h, curve.norms, cfg.potential, cfg.N_max)
    ctx["files"]["a_h.csv"] = curve.to_csv(rep.config_hash)
    ctx["files"]["fit.csv"] = _with_hash(fit_report_csv([rep.fit]), rep.config_hash)
    rep.claims.append(Claim("a_h", "fitted exponent", rep.fit.exponent, f"<= N_max={cfg.N_max:g}", rep.fit.exponent <= cfg.N_max))
    rep.claims.append(Claim("a_h", "classification:" + rep.fit.classification, rep.fit.growth, "a(h)h growth", True))


def _stage_gluing(cfg, rep, ctx):
    rows, fit = gluing_report("toCAP", cfg.h_list, ctx["V"], cfg.E, cfg.layout, cfg.L, cfg.points_per_h, cfg.tol, cfg.seed)
    ctx["files"]["gluing.csv"] = gluing_csv(rows, rep.config_hash)
    worst = max(r.residual_identity for r in rows)
    rep.claims.append(Claim("gluing", "identity residual", worst, "<= 1e-10", worst <= 1e-10))
    rep.claims.append(Claim("gluing", "min fitted decay order", float(fit.slopes.min()), ">= 3, non-decreasing", fit.superpolynomial))


def _stage_rw_bound(cfg, rep, ctx):
    lines = ["h,norm_RW,a_h,ratio,config_hash"]
    ratios = []
    for h, a in zip(rep.a_curve.h, rep.a_curve.norms):
        grid = make_grid(cfg.L, h / cfg.points_per_h)
        nrm = resolvent_norm(Factorization(cap_operator(grid, ctx["V"], h, cfg.layout, cfg.stencil), cfg.E))
        h, a, nrm = float(h), float(a), float(nrm)
        ratios.append(nrm / a)
        lines.append(f"{h!r},{nrm!r},{a!r},{nrm / a!r},{rep.config_hash}")
    ctx["files"]["rw_bound.csv"] = "\n".join(lines) + "\n"
    spread = max(ratios) / min(ratios)
    rep.claims.append(Claim("rw_bound", "||R_W(E)||/a(h) spread", spread, "<= 2 (bounded ratio)", spread <= 2.0))


def _stage_certificate(cfg, rep, ctx):
    cert = disk_certificate(
        ctx["V"], rep.a_curve, cfg.E, layout=cfg.layout, L=cfg.L, points_per_h=cfg.points_per_h,
        C_max=cfg.C_max, N_max=cfg.N_max, tol=cfg.tol,
    )
    rep.certificate = cert
    ctx["files"]["disk.csv"] = _with_hash(cert.to_csv(), rep.config_hash)
    ctx["files"]["disk_summary.csv"] = _with_hash(cert.summary_csv(), rep.config_hash)
    if cert.out_of_hypothesis:
        rep.claims.append(Claim("certificate", "out-of-hypothesis h count", float(len(cert.out_of_hypothesis)), "a(h) > h^-N_max", True))
    C = cert.C_trial if cert.C_trial is not None else np.inf
    rep.claims.append(Claim("certificate", "smallest passing C_trial", float(C), f"<= {cfg.C_max:g}", cert.passed))


def _stage_microlocal(cfg, rep, ctx):
    from .gluing import build_gluing

    V = ctx["V"]
    probe = trapping_probe(V, cfg.E)
    lines = ["kind,h,x,xi,value,config_hash"]
    for w in probe.witnesses[:20]:
        lines.append(f"trapped_witness,nan,{float(w.x)!r},{float(w.xi)!r},nan,{rep.config_hash}")
    rep.claims.append(Claim("microlocal", "trapped set " + probe.status, float(len(probe.witnesses)), "witness count", True))
    fields = []
    for h in cfg.h_list:
        grid = make_grid(cfg.L, h / cfg.points_per_h)
        sys = build_gluing("toCAP", grid, V, h, cfg.E, cfg.layout)
        f = coherent_state(grid, h, 0.0, np.sqrt(cfg.E))
        F = fbi_transform(sys.apply_Ainf(sys.apply_AK(f)), grid, h, xi_max=2.0 * np.sqrt(cfg.E + 1.0))
        fields.append(F)
    verdict = empty_at_order(fields, cfg.decay_order, [1.0] * len(fields))
    for h, r, o in zip(sorted(cfg.h_list, reverse=True), verdict.relative_amplitudes, verdict.fitted_orders):
        r, o = float(r), float(o)
        lines.append(f"error_product_amplitude,{float(h)!r},nan,nan,{r!r},{rep.config_hash}")
        lines.append(f"error_product_order,{float(h)!r},nan,nan,{o!r},{rep.config_hash}")
    rep.claims.append(
        Claim("microlocal", f"A_inf A_K f empty at order {cfg.decay_order:g}", float(verdict.fitted_orders.min()), f">= {cfg.decay_order:g}", verdict.empty)
    )
    # outgoing packet through the free absorber resolvent, largest resolvable h
    resolvable = [h for h in cfg.h_list if resolves_tails(h, cfg.E)]
    if not resolvable:
        raise ValueError("no h in the sweep resolves mask tails at this E")
    h = max(resolvable)
    grid = make_grid(cfg.L, h / cfg.points_per_h)
    lay = cfg.layout
    fact = Factorization(outgoing_operator(grid, None, h, lay, cfg.stencil), cfg.E)
    f = coherent_state(grid, h, lay.R0 + 3.5, np.sqrt(cfg.E))
    prop = propagation_check(fact.solve(f), f, grid, h, E=cfg.E)
    lines.append(f"propagation_violations,{float(h)!r},nan,nan,{float(len(prop.violations))!r},{rep.config_hash}")
    rep.claims.append(Claim("microlocal", "free-CAP propagation", float(len(prop.violations)), "0 violations", prop.passed))
    ctx["files"]["microlocal.csv"] = "\n".join(lines) + "\n"


STAGES = {
    "build": _stage_build,
    "a_h": _stage_a_h,
    "gluing": _stage_gluing,
    "rw_bound": _stage_rw_bound,
    "certificate": _stage_certificate,
    "microlocal": _stage_microlocal,
}


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunReport:
    """Run the configured stages in order; failures mark their dependents skipped.

    CSV files carry the config hash and are byte-identical across reruns of
    the same configuration. Timings go to ``timings.txt``, kept out of the
    CSVs for that reason.
    """
    rep = RunReport(cfg, cfg.config_hash())
    ctx: dict = {"files": {}}
    for name in ("build",) + tuple(cfg.stages):
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}")
        blocked = [d for d in DEPENDS.get(name, ()) if rep.stages.get(d, StageResult(d, "skipped")).status != "ok"]
        if blocked:
            rep.stages[name] = StageResult(name, "skipped", message="depends on " + ", ".join(blocked))
            continue
        t0 = time.perf_counter()
        try:
            STAGES[name](cfg, rep, ctx)
            rep.stages[name] = StageResult(name, "ok", time.perf_counter() - t0)
        except (LayoutError, ArithmeticError, ValueError, RuntimeError) as err:
            rep.stages[name] = StageResult(name, "failed", time.perf_counter() - t0, f"{type(err).__name__}: {err}")
    ctx["files"]["stages.csv"] = _csv(
        ["stage", "status", "message", "config_hash"],
        [[s.name, s.status, s.message, rep.config_hash] for s in rep.stages.values()],
    )
    ctx["files"]["claims.csv"] = rep.claims_csv()
    rep.artifacts = dict(sorted(ctx["files"].items()))
    if write:
        write_artifacts(rep)
    return rep


def write_artifacts(rep: RunReport) -> Path:
    out = Path(rep.config.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = [f"config_hash = {rep.config_hash}", "", "[config]", rep.config.to_text().rstrip(), "", "[files]"]
    for name, text in rep.artifacts.items():
        (out / name).write_text(text, newline="\n")
        manifest.append(f"{name} sha256={hashlib.sha256(text.encode()).hexdigest()}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", newline="\n")
    (out / "config.txt").write_text(rep.config.to_text(), newline="\n")
    timings = [f"{s.name} {s.status} {s.seconds:.3f}s" for s in rep.stages.values()]
    (out / "timings.txt").write_text("\n".join(timings) + "\n", newline="\n")
    return out


def load_curve(directory) -> NormCurve:
    """The a(h) curve written by ``run_experiment``."""
    return NormCurve.from_csv((Path(directory) / "a_h.csv").read_text())
