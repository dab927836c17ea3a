"""Command-line entry point: ``httn {synth,train,eval,ablate,gradcheck,dims}``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from pathlib import Path

from . import ablation
from .backbone import Manifest, SynthSpec, read_manifest, save_features, synth_dataset, write_manifest
from .config import COMMANDS, RunSpec, load_config, save_config
from .episodes import evaluate
from .errors import ConfigError, HTTNError
from .gradcheck import run_gradcheck
from .gtmt import elstc_dims, gtmt_param_count
from .model import HTTN
from .taa import taa_param_count
from .trainer import CheckpointBundle, count_trainable, train

log = logging.getLogger("httn")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="httn", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML/JSON config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    parser.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    parser.add_argument("--deterministic", action="store_true", help="pin numeric libraries to one thread")
    parser.add_argument("--workers", type=int, default=1)
    return parser


def _prepare_out(cfg, spec: RunSpec, refuse_nonempty: bool = False):
    """Create the output directory and persist the effective config there."""
    if spec.out is None:
        return None
    out = Path(spec.out)
    if refuse_nonempty and out.exists() and any(out.iterdir()) and not spec.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    return out


def cmd_synth(cfg, spec: RunSpec) -> int:
    s = cfg.synth
    if s.split not in ("base", "novel"):
        raise ConfigError(f"synth.split must be 'base' or 'novel', got {s.split!r}")
    if spec.out is None:
        raise ConfigError("synth needs --out")
    out = _prepare_out(cfg, spec, refuse_nonempty=True)
    synth = SynthSpec(classes=s.classes, T=s.T, M=s.M, C=s.C, num_prototypes=s.num_prototypes,
                      pattern=s.pattern, sigma=s.sigma, first_class=s.first_class, pattern_seed=s.pattern_seed)
    (out / "features").mkdir(exist_ok=True)
    records = []
    for rec, x in synth_dataset(synth, s.per_class, cfg.seed):
        rel = f"features/{rec.path}"
        save_features(out / rel, x)
        records.append(type(rec)(rec.sample_id, rec.label, rel, rec.seed))
    write_manifest(out / "manifest.jsonl", Manifest(s.classes, s.split, records))
    print(f"wrote {len(records)} samples of {s.classes} classes to {out}")
    return 0


def _manifest(path, what):
    if not path:
        raise ConfigError(f"data.{what} is required for this command")
    return read_manifest(path)


def cmd_train(cfg, spec: RunSpec) -> int:
    out = _prepare_out(cfg, spec)
    manifest = _manifest(cfg.data.train_manifest, "train_manifest")
    model = HTTN(cfg.model, seed=cfg.seed)
    result = train(cfg.train, manifest, model, out_dir=out,
                   progress=lambda e, l, a: print(f"epoch {e:3d}  loss {l:.4f}  acc {a:6.2f}", flush=True))
    print(f"trainable parameters: {count_trainable(model)}  wall time: {result.wall_time:.1f}s")
    return 0


def cmd_eval(cfg, spec: RunSpec) -> int:
    out = _prepare_out(cfg, spec)
    manifest = _manifest(cfg.data.eval_manifest, "eval_manifest")
    model = HTTN(cfg.model, seed=cfg.seed)
    if cfg.data.checkpoint:
        CheckpointBundle.load(cfg.data.checkpoint).apply(model)
    e = cfg.eval
    report = evaluate(model, manifest, e.episodes, e.N, e.K, e.Q, seed=cfg.seed, workers=spec.workers)
    if out is not None:
        report.to_json(out / "report.json")
        report.to_csv(out / "report.csv")
    print(f"{e.N}-way {e.K}-shot accuracy over {report.episodes} episodes: "
          f"{report.mean_accuracy:.2f} +- {report.ci95:.2f}")
    return 0


def cmd_ablate(cfg, spec: RunSpec) -> int:
    out = _prepare_out(cfg, spec)
    cells = ablation.expand_grid(cfg.ablate.axes, cfg.model)
    dry = cfg.ablate.dry_run
    tm = None if dry else _manifest(cfg.data.train_manifest, "train_manifest")
    em = None if dry else _manifest(cfg.data.eval_manifest, "eval_manifest")
    rows = ablation.run_ablation(cells, cfg.train, cfg.eval, tm, em, dry_run=dry, workers=spec.workers)
    if out is not None:
        ablation.write_rows(rows, out / "ablation.csv")
    w = csv.DictWriter(sys.stdout, fieldnames=ablation.COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return 0


def cmd_gradcheck(cfg, spec: RunSpec) -> int:
    out = _prepare_out(cfg, spec)
    report, seconds = run_gradcheck(cfg.gradcheck, seed=cfg.seed)
    text = report.format() + f"\n{'PASS' if report.passed else 'FAIL'} in {seconds:.1f}s"
    print(text)
    if out is not None:
        (out / "gradcheck.txt").write_text(text + "\n")
    return 0 if report.passed else 4


def dims_rows(cfg) -> list:
    m = cfg.model
    rows = []
    for G in (1, 2, 4, 8):
        if m.T % G:
            continue
        t_prime, dim, _ = elstc_dims(m.T, m.C, m.tau, G)
        rows.append({"G": G, "T_prime": t_prime, "cov_dim": dim,
                     "gtmt_params": gtmt_param_count(m.C, m.tau, G, m.k_c, m.C_M)})
    return rows


def cmd_dims(cfg, spec: RunSpec) -> int:
    out = _prepare_out(cfg, spec)
    m = cfg.model
    rows = dims_rows(cfg)
    model_rows = [
        ("taa_params_per_block", taa_param_count(m.C, m.rho, m.k_t, m.share_down)),
        ("trainable_closed_form", m.closed_form_trainable()),
    ]
    w = csv.DictWriter(sys.stdout, fieldnames=["G", "T_prime", "cov_dim", "gtmt_params"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    for k, v in model_rows:
        print(f"{k},{v}")
    if out is not None:
        with open(out / "dims.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["G", "T_prime", "cov_dim", "gtmt_params"])
            w.writeheader()
            w.writerows(rows)
    return 0


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "dims": cmd_dims,
}


def _setup_logging() -> None:
    level = os.environ.get("HTTN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    spec = RunSpec(args.command, args.config, args.out, args.seed, args.overrides,
                   args.force, args.deterministic, max(1, args.workers))
    try:
        cfg = load_config(spec.config, spec.overrides, spec.seed)
        ctx = _single_thread() if spec.deterministic else contextlib.nullcontext()
        with ctx:
            return HANDLERS[spec.command](cfg, spec)
    except HTTNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
