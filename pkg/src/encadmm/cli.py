"""Command line entry point: ``encadmm run | verify | keygen-demo``.

Exit codes::

    0  success
    2  configuration error
    3  validation or budget failure (reported before any run starts)
    4  audit failure in an encrypted run
    5  resource or runtime failure
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import lwe
from .experiment import (MODES, BudgetOrValidationError, Config, ConfigError, run, verify,
                         write_artifacts)
from .fixedpoint import FpCodec, LevelExhausted

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_AUDIT, EXIT_RUNTIME = 0, 2, 3, 4, 5


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "mode", None) and args.mode != "all":
        cfg.modes = (args.mode,)
    return cfg


def _fail(category: str, msg: str, code: int) -> int:
    print(f"error[{category}]: {msg}", file=sys.stderr)
    return code


def cmd_verify(args) -> int:
    cfg = _config(args)
    rep = verify(cfg)
    for name, ok, detail in rep.checks:
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if rep.ok else EXIT_VALIDATION


def cmd_run(args) -> int:
    cfg = _config(args)

    def progress(msg):
        if not args.quiet:
            print(msg, file=sys.stderr)

    res = run(cfg, progress=progress)
    files = write_artifacts(res, cfg.out)
    for name, mode in res.report["modes"].items():
        line = f"{name}: formation error {mode['formation_error_final']:.4g}"
        if name == "encrypted":
            audit = mode.get("audit") or {}
            line += (f", max scale exponent {mode['max_scale_exp']}, audit "
                     f"{'passed' if audit.get('ok') else 'FAILED'}")
        print(line)
    dev = res.report["deviation"]
    if "encrypted_vs_plain_alpha_max" in dev:
        print(f"max |encrypted - plain| alpha: {dev['encrypted_vs_plain_alpha_max']:.3g}")
    for k, v in files.items():
        print(f"wrote {k}: {v}")
    enc = res.report["modes"].get("encrypted")
    if enc and not (enc.get("audit") or {}).get("ok", False):
        for v in enc["audit"]["violations"]:
            print(f"audit violation: {v}", file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_keygen_demo(args) -> int:
    """Two key sets, one value encrypted, switched between them and decrypted."""
    codec = FpCodec()
    scheme = lwe.SchemeParams.toy(codec)
    rng = np.random.default_rng(args.seed)
    t0 = time.perf_counter()
    k0 = lwe.keygen(scheme, 0, args.seed)
    k1 = lwe.keygen(scheme, 1, args.seed)
    t_keys = time.perf_counter() - t0
    reg = lwe.KeyRegistry()
    t0 = time.perf_counter()
    swk = lwe.gen_switch_key(k0, k1.pk, reg, codec.S, rng)
    t_swk = time.perf_counter() - t0
    x = np.array([1.25, -0.5, 3.0])
    ct = lwe.encrypt_values(k0.pk, codec, x, rng)
    # switching noise is absorbed only at a deep enough scale, as in a real run
    ct = lwe.lift(ct, args.level, codec, scheme)
    sw = lwe.key_switch(ct, swk, scheme)
    back = lwe.decrypt_values(k1, codec, sw)
    out = {
        "scheme": {"n": scheme.n, "log2_q": scheme.plain_bits,
                   "log2_ciphertext_modulus": scheme.bits, "levels": scheme.levels,
                   "gadget": f"{scheme.gadget_base}^{scheme.gadget_len}"},
        "keygen_seconds": round(t_keys, 3),
        "switch_key_seconds": round(t_swk, 3),
        "switch_key_bytes": len(swk.to_bytes()),
        "ciphertext_bytes_per_entry": len(ct[0].to_bytes()),
        "plaintext": x.tolist(),
        "decrypted_after_switch": back.tolist(),
        "max_abs_error": float(np.max(np.abs(back - x))),
        "scale_exp_after_switch": sw.scale_exp,
        "noise_bound_after_switch": max(sw.noise),
        "noise_margin_ok": lwe.noise_margin_ok(sw, codec.S, scheme.delta),
    }
    print(json.dumps(out, indent=2))
    ok = out["noise_margin_ok"] and out["max_abs_error"] <= 1 / codec.S
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="encadmm",
                                description="Encrypted distributed ADMM for formation control")
    sub = p.add_subparsers(dest="cmd", required=True)
    for name, help_ in (("run", "run the closed loop and write artifacts"),
                        ("verify", "check a configuration without running it")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--mode", choices=MODES + ("all",), default=None)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--quiet", action="store_true")
    kd = sub.add_parser("keygen-demo", help="generate keys, switch a ciphertext, decrypt")
    kd.add_argument("--seed", type=int, default=0)
    kd.add_argument("--level", type=int, default=8,
                    help="scale exponent the ciphertext is lifted to before switching")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "verify": cmd_verify, "keygen-demo": cmd_keygen_demo}[args.cmd]
    try:
        return handler(args)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except BudgetOrValidationError as exc:
        return _fail("validation", str(exc), EXIT_VALIDATION)
    except LevelExhausted as exc:
        return _fail("budget", str(exc), EXIT_VALIDATION)
    except MemoryError as exc:
        return _fail("resource", str(exc) or "out of memory", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
