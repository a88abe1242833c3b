"""Scenario configuration, the three solution modes, and output artifacts.

Config schema (JSON; every key optional)::

    {
      "scenario": "ring8" | "star9" | "generic9",
      "problem":  {explicit problem, see problem_from_dict; replaces "scenario"},
      "T": 20, "seed": 0,
      "modes": ["centralized", "plain", "encrypted"],
      "formation": {"N": 4, "r": 0.1, "eta": 10.0, "radius": 10.0},
      "admm": {"rho": 0.2, "iterations": 5, "early_stop": false},
      "codec": {"preset": "standard"} | {"s": .., "sigma": .., "q0": .., "L": .., "B": ..},
      "scheme": {"preset": "toy" | "small", "gadget_base": 65536, "noise_width": 8},
      "delegates": {"1": 2, ...},
      "out": "out"
    }
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable
from xml.sax.saxutils import escape

import numpy as np

from . import lwe
from .admm import AdmmParams, precompute_gamma, run_plain_admm
from .fixedpoint import FpCodec
from .formation import (SCENARIOS, ClosedLoopResult, Scenario, closed_loop, formation_error,
                        scenario)
from .graph import CommGraph, IndexLayout, validate_locality
from .problem import (AgentCost, ConsensusProblem, StructuredParam, centralized_solve,
                      validate_problem)
from .protocol import (Auditor, EncryptedSystem, OPERATOR, Transport, default_delegates,
                       required_depth)

MODES = ("centralized", "plain", "encrypted")
# refuse encrypted runs whose key material alone would exceed this
MEMORY_LIMIT = 3 * 2 ** 30


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    scenario: str = "ring8"
    problem: dict | None = None
    T: int = 20
    seed: int = 0
    modes: tuple[str, ...] = MODES
    formation: dict = field(default_factory=dict)
    admm: dict = field(default_factory=dict)
    codec: dict = field(default_factory=lambda: {"preset": "standard"})
    scheme: dict = field(default_factory=lambda: {"preset": "toy"})
    delegates: dict | None = None
    out: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        cfg = cls(**d)
        cfg.modes = tuple(cfg.modes)
        bad = [m for m in cfg.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}")
        if cfg.problem is None and cfg.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {cfg.scenario!r}")
        if int(cfg.T) < 0:
            raise ConfigError("T must be non-negative")
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    # -- resolved objects ------------------------------------------------------

    def admm_params(self) -> AdmmParams:
        a = {"rho": 0.2, "iterations": 5, "early_stop": False, **self.admm}
        try:
            return AdmmParams(float(a["rho"]), int(a["iterations"]), bool(a["early_stop"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def fp_codec(self) -> FpCodec:
        c = dict(self.codec)
        preset = c.pop("preset", None)
        if preset not in (None, "standard"):
            raise ConfigError(f"unknown codec preset {preset!r}")
        try:
            return FpCodec(**c)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"codec: {exc}") from exc

    def scheme_params(self, codec: FpCodec) -> lwe.SchemeParams:
        s = dict(self.scheme)
        preset = s.pop("preset", "toy")
        if codec.bits is None:
            raise ConfigError("the modulus must be a power of two for the LWE scheme")
        try:
            if preset == "toy":
                return lwe.SchemeParams.toy(codec, **s)
            if preset == "small":
                return lwe.SchemeParams.small(codec, **s)
            if preset == "custom":
                return lwe.SchemeParams(q=codec.q, levels=codec.L, **s)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scheme: {exc}") from exc
        raise ConfigError(f"unknown scheme preset {preset!r}")

    def build_scenario(self) -> Scenario:
        a = self.admm_params()
        try:
            return scenario(self.scenario, int(self.seed), T=int(self.T), rho=a.rho,
                            iterations=a.iterations, **self.formation)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"formation: {exc}") from exc

    def delegate_map(self, graph) -> dict[int, int]:
        if self.delegates is None:
            return default_delegates(graph)
        return {int(k): int(v) for k, v in self.delegates.items()}


def problem_from_dict(d: dict) -> ConsensusProblem:
    """Explicit problem: ``{"M", "edges", "nu", "K", "alpha_len", "costs", "params"}``.

    ``costs[i]`` holds ``H``, ``F`` and optionally ``G``, ``E`` as nested lists;
    ``params[i]`` holds ``beta`` and ``delta``.  Agent keys are strings of ids.
    """
    try:
        g = CommGraph(int(d["M"]), [tuple(e) for e in d.get("edges", [])])
        K = {int(i): v for i, v in d["K"].items()}
        lay = IndexLayout(int(d["nu"]), K, {int(i): v for i, v in d["alpha_len"].items()})
        costs = {int(i): AgentCost(c["H"], c["F"], c.get("G"), c.get("E"))
                 for i, c in d["costs"].items()}
        params = {int(i): StructuredParam(p.get("beta", []), p.get("delta", []))
                  for i, p in d["params"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from exc
    return ConsensusProblem(g, lay, costs, params)


def key_memory_bytes(scheme: lwe.SchemeParams, agents: int) -> int:
    """Rough bytes of key material held in memory during an encrypted run."""
    ct = (scheme.n + 1) * scheme.limbs * 4
    pk = scheme.pk_size * ct
    swk = scheme.n * scheme.gadget_len * ct
    return (agents + 1) * (pk + scheme.n * scheme.limbs * 4) + 2 * agents * swk


# ---------------------------------------------------------------------------
# verify


@dataclass
class CheckReport:
    checks: list[tuple[str, bool, str]] = field(default_factory=list)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append((name, bool(ok), detail))

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def as_dict(self) -> dict:
        return {"ok": self.ok,
                "checks": [{"name": n, "ok": ok, "detail": d} for n, ok, d in self.checks]}


def base_problem(cfg: Config) -> ConsensusProblem:
    if cfg.problem is not None:
        return problem_from_dict(cfg.problem)
    from .formation import build_problem
    sc = cfg.build_scenario()
    return build_problem(sc.spec, 0, sc.x0, {i: np.zeros(sc.spec.model.nu) for i in sc.x0})


def verify(cfg: Config) -> CheckReport:
    rep = CheckReport()
    admm = cfg.admm_params()
    prob = base_problem(cfg)
    loc = validate_locality(prob.graph, prob.layout)
    rep.add("validate_locality", loc.ok, "; ".join(loc.describe()) or "every entry reachable")
    pv = validate_problem(prob)
    rep.add("validate_problem", pv.ok, "; ".join(pv.issues) or "all agents valid")
    codec = cfg.fp_codec()
    depth = required_depth(admm.iterations, admm.early_stop)
    b = codec.budget_check(depth)
    rep.add("budget_check", b.ok, f"required depth {depth}: {b.detail}")
    try:
        scheme = cfg.scheme_params(codec)
        rep.add("scheme_params", True, f"{scheme.label}: n={scheme.n}, log2 q={scheme.plain_bits}, "
                f"log2 Q={scheme.bits}, "
                f"gadget {scheme.gadget_base}^{scheme.gadget_len}")
        mem = key_memory_bytes(scheme, prob.graph.M)
        rep.add("key_memory", mem <= MEMORY_LIMIT,
                f"about {mem / 2 ** 30:.2f} GiB of key material (limit "
                f"{MEMORY_LIMIT / 2 ** 30:.0f} GiB)")
    except ConfigError as exc:
        rep.add("scheme_params", False, str(exc))
    try:
        dels = cfg.delegate_map(prob.graph)
        bad = [f"{i}->{j}" for i, j in dels.items()
               if i == j or not prob.graph.has_edge(i, j)]
        rep.add("delegates", not bad, "delegates are neighbors" if not bad
                else f"invalid delegate assignments {bad}")
        reg = lwe.KeyRegistry()
        try:
            for i in sorted(dels):
                reg.register(OPERATOR, i)
            cyc = lwe.detect_key_cycles(reg.edges)
            rep.add("detect_key_cycles", not cyc, "registry is a star from the operator"
                    if not cyc else f"cycles {cyc}")
        except lwe.KeyCycleError as exc:
            rep.add("detect_key_cycles", False, str(exc))
    except Exception as exc:  # noqa: BLE001 - reported, not raised
        rep.add("delegates", False, str(exc))
    return rep


# ---------------------------------------------------------------------------
# run


@dataclass
class ModeRun:
    mode: str
    loop: ClosedLoopResult
    seconds: float
    extra: dict = field(default_factory=dict)


@dataclass
class RunResult:
    scenario: Scenario
    runs: dict[str, ModeRun]
    report: dict


def _plain_solver(sc: Scenario, admm: AdmmParams):
    gammas: dict = {}

    def solve(t, prob, guess):
        if not gammas:
            gammas.update({i: precompute_gamma(prob.costs[i], admm.rho) for i in prob.agents})
        return run_plain_admm(prob, admm, guess, gammas=gammas, validate=(t == 0)).alpha
    return solve


def _central_solver(sc: Scenario):
    def solve(t, prob, guess):
        sol = centralized_solve(prob)
        return {i: sol.z[i][:prob.layout.alpha_len[i]] for i in prob.agents}
    return solve


def run_encrypted_loop(sc: Scenario, admm: AdmmParams, codec: FpCodec,
                       scheme: lwe.SchemeParams, seed: int, delegates=None,
                       auditor_online: bool = True, keep_frames: bool = False,
                       lockstep: bool = True, progress: Callable[[str], None] | None = None):
    """Closed loop with the encrypted solver; returns ``(loop, info)``."""
    from .formation import build_problem
    transport = Transport(keep_frames=keep_frames)
    prob0 = build_problem(sc.spec, 0, sc.x0, {i: np.zeros(sc.spec.model.nu) for i in sc.x0})
    t0 = time.perf_counter()
    system = EncryptedSystem(prob0, admm, codec, scheme, seed=seed, delegates=delegates,
                             transport=transport)
    auditor = Auditor(system.roles()) if auditor_online else None
    if auditor:
        transport.observers.append(auditor)
    system.setup()
    setup_s = time.perf_counter() - t0
    plain = _plain_solver(sc, admm)
    lock_dev: list[float] = []

    def solve(t, prob, guess):
        alpha = system.solve(prob, guess)
        if lockstep:
            ref = plain(t, prob, guess)
            lock_dev.append(max(float(np.max(np.abs(alpha[i] - ref[i]), initial=0.0))
                                for i in alpha))
        if progress:
            progress(f"encrypted step {t} done")
        return alpha

    loop = closed_loop(sc, solve)
    info = {"setup_seconds": setup_s, "max_scale_exp": system.monitor.max_level,
            "lockstep_deviation": lock_dev, "messages": len(transport.log),
            "system": system}
    if auditor:
        res = auditor.finish(transport.log)
        info["audit"] = {"ok": res.ok, "violations": res.violations, "flags": res.flags,
                         "messages": res.messages}
    return loop, info


def run(cfg: Config, progress: Callable[[str], None] | None = None,
        modes: tuple[str, ...] | None = None) -> RunResult:
    modes = tuple(modes or cfg.modes)
    if cfg.problem is not None:
        raise ConfigError("closed-loop runs need a formation scenario; "
                          "explicit problems are checked with 'verify'")
    rep = verify(cfg)
    if not rep.ok:
        failed = [f"{n}: {d}" for n, ok, d in rep.checks if not ok]
        raise BudgetOrValidationError("; ".join(failed))
    sc = cfg.build_scenario()
    admm = cfg.admm_params()
    runs: dict[str, ModeRun] = {}
    enc_info: dict = {}
    for mode in MODES:
        if mode not in modes:
            continue
        t0 = time.perf_counter()
        if mode == "centralized":
            loop = closed_loop(sc, _central_solver(sc))
            runs[mode] = ModeRun(mode, loop, time.perf_counter() - t0)
        elif mode == "plain":
            loop = closed_loop(sc, _plain_solver(sc, admm))
            runs[mode] = ModeRun(mode, loop, time.perf_counter() - t0)
        else:
            codec = cfg.fp_codec()
            scheme = cfg.scheme_params(codec)
            loop, enc_info = run_encrypted_loop(sc, admm, codec, scheme, int(cfg.seed),
                                                cfg.delegate_map(sc.spec.graph),
                                                progress=progress)
            runs[mode] = ModeRun(mode, loop, time.perf_counter() - t0, enc_info)
        if progress:
            progress(f"{mode}: {runs[mode].seconds:.1f} s")
    return RunResult(sc, runs, make_report(sc, runs, admm))


class BudgetOrValidationError(RuntimeError):
    pass


def _alpha_dev(a: ClosedLoopResult, b: ClosedLoopResult) -> list[float]:
    return [max(float(np.max(np.abs(x[i] - y[i]), initial=0.0)) for i in x)
            for x, y in zip(a.alpha, b.alpha)]


def make_report(sc: Scenario, runs: dict[str, ModeRun], admm: AdmmParams) -> dict:
    rep: dict[str, Any] = {"scenario": sc.kind, "T": sc.T, "seed": sc.seed,
                           "rho": admm.rho, "iterations": admm.iterations,
                           "early_stop": admm.early_stop, "modes": {}}
    for name, r in runs.items():
        entry = {"seconds": round(r.seconds, 3),
                 "formation_error_final": formation_error(sc, r.loop.y[-1]),
                 "final_positions": r.loop.y[-1].tolist()}
        if name == "encrypted":
            info = r.extra
            entry.update({"setup_seconds": round(info["setup_seconds"], 3),
                          "max_scale_exp": info["max_scale_exp"],
                          "messages": info["messages"],
                          "lockstep_alpha_deviation_max": max(info["lockstep_deviation"],
                                                              default=0.0),
                          "audit": info.get("audit")})
        rep["modes"][name] = entry
    dev = {}
    if "encrypted" in runs and "plain" in runs:
        d = _alpha_dev(runs["encrypted"].loop, runs["plain"].loop)
        dev["encrypted_vs_plain_alpha_per_step"] = d
        dev["encrypted_vs_plain_alpha_max"] = max(d, default=0.0)
        dev["encrypted_vs_plain_position_max"] = float(
            np.max(np.abs(runs["encrypted"].loop.y - runs["plain"].loop.y), initial=0.0))
    if "plain" in runs and "centralized" in runs:
        d = _alpha_dev(runs["plain"].loop, runs["centralized"].loop)
        dev["plain_vs_centralized_alpha_max"] = max(d, default=0.0)
        dev["plain_vs_centralized_position_max"] = float(
            np.max(np.abs(runs["plain"].loop.y - runs["centralized"].loop.y), initial=0.0))
    rep["deviation"] = dev
    return rep


# ---------------------------------------------------------------------------
# artifacts

CSV_HEADER = ("t", "agent", "y1", "y2", "u1", "u2")
COLORS = {"centralized": "#2ca02c", "plain": "#d62728", "encrypted": "#1f77b4"}


def write_csv(path, loop: ClosedLoopResult) -> int:
    """Rows ``(t, agent, y1, y2, u1, u2)`` for ``t = 0..T-1``; returns the row count."""
    T = loop.u.shape[0]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t in range(T):
            for a in range(loop.y.shape[1]):
                y, u = loop.y[t, a], loop.u[t, a]
                w.writerow([t, a + 1, repr(float(y[0])), repr(float(y[1])),
                            repr(float(u[0])), repr(float(u[1]))])
                rows += 1
    return rows


def write_svg(path, sc: Scenario, runs: dict[str, ModeRun], size: int = 640) -> None:
    """Trajectories per mode, initial positions (circles), ideal final formation (crosses)."""
    T = sc.T
    ideal = sc.spec.ideal_positions(T)
    pts = [ideal] + [r.loop.y.reshape(-1, 2) for r in runs.values()]
    allp = np.vstack(pts) if pts else np.zeros((1, 2))
    lo, hi = allp.min(axis=0) - 1.0, allp.max(axis=0) + 1.0
    span = float(max(hi - lo))
    pad = 20

    def xy(p):
        x = pad + (p[0] - lo[0]) / span * (size - 2 * pad)
        y = size - pad - (p[1] - lo[1]) / span * (size - 2 * pad)
        return f"{x:.2f}", f"{y:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<title>{escape(sc.kind)} formation, T={T}</title>',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for name, r in runs.items():
        color = COLORS[name]
        out.append(f'<g id="{name}" stroke="{color}" fill="none">')
        y = r.loop.y
        for a in range(y.shape[1]):
            line = " ".join(",".join(xy(p)) for p in y[:, a])
            out.append(f'<polyline points="{line}" stroke-width="1.2"/>')
            cx, cy = xy(y[0, a])
            out.append(f'<circle cx="{cx}" cy="{cy}" r="3"/>')
        if y.shape[0] > 1:
            for i, j in sc.spec.graph.sorted_edges():
                (x1, y1), (x2, y2) = xy(y[-1, i - 1]), xy(y[-1, j - 1])
                out.append(f'<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" '
                           f'stroke-dasharray="4 3"/>')
        out.append("</g>")
    out.append('<g id="ideal" stroke="black" stroke-width="1.2">')
    for p in ideal:
        cx, cy = (float(v) for v in xy(p))
        out.append(f'<line x1="{cx - 4:.2f}" y1="{cy - 4:.2f}" x2="{cx + 4:.2f}" '
                   f'y2="{cy + 4:.2f}"/>')
        out.append(f'<line x1="{cx - 4:.2f}" y1="{cy + 4:.2f}" x2="{cx + 4:.2f}" '
                   f'y2="{cy - 4:.2f}"/>')
    out.append("</g>")
    for k, name in enumerate(runs):
        out.append(f'<text x="{pad}" y="{pad + 14 * k}" font-size="12" '
                   f'fill="{COLORS[name]}">{escape(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def write_artifacts(res: RunResult, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, r in res.runs.items():
        p = out / f"trajectory_{name}.csv"
        write_csv(p, r.loop)
        files[f"csv_{name}"] = str(p)
    svg = out / "formation.svg"
    write_svg(svg, res.scenario, res.runs)
    files["svg"] = str(svg)
    enc = res.runs.get("encrypted")
    if enc is not None:
        log = out / "transport_log.jsonl"
        enc.extra["system"].transport.write_log(log)
        files["transport_log"] = str(log)
    rep = out / "report.json"
    rep.write_text(json.dumps(res.report, indent=2, sort_keys=True) + "\n")
    files["report"] = str(rep)
    return files
