"""Command-line entry point: ``devo <subcommand> ...``.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error
(bad flags, missing input paths).
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .classifier import Arch, ClassifierError, Hyperparams, evaluate, fine_tune, init_model, train
from .drift import DriftConfigError, JudgmentConfig, ThresholdLadder
from .evolution import (
    EvolutionError,
    EvolutionMode,
    RunLayout,
    StageConfig,
    StageReport,
    StageStream,
    render_table,
    run_lifecycle,
)
from .flows import (
    DEFAULT_IDLE_TIMEOUT,
    DEFAULT_NORM_DIVISOR,
    IngestError,
    IngestStats,
    LabelDict,
    assemble_flows,
    feature_matrix,
    load_ndjson,
    write_ndjson,
)
from .pcap import read_pcap
from .silver import LaidaConfig, SilverPoolError, load_pool, pool_split, stratified_split
from .sim import PRESETS, SimConfig, SimConfigError, gen_stage

log = logging.getLogger("devo")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    run_id: str
    created_ts: float
    config_digest: str | None = None
    command_history: list[dict] = field(default_factory=list)

    @classmethod
    def load_or_create(cls, run_dir: Path) -> "RunManifest":
        path = run_dir / MANIFEST_NAME
        if path.exists():
            d = json.loads(path.read_text())
            return cls(d["run_id"], d["created_ts"], d.get("config_digest"), list(d.get("command_history", [])))
        return cls(run_dir.name, time.time())

    def record(self, argv: list[str], status: int, config_digest: str | None) -> None:
        if config_digest is not None:
            self.config_digest = config_digest
        self.command_history.append({
            "argv": list(argv),
            "cwd": os.getcwd(),
            "ts": time.time(),
            "exit_status": status,
            "config_digest": config_digest,
        })

    def save(self, run_dir: Path) -> None:
        run_dir.mkdir(parents=True, exist_ok=True)
        tmp = run_dir / (MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, run_dir / MANIFEST_NAME)


# configuration

DEFAULT_CONFIG = {
    "arch": asdict(Arch()),
    "hyper": asdict(Hyperparams()),
    "laida": asdict(LaidaConfig()),
    "judgment": asdict(JudgmentConfig()),
    "ladder": [list(r) for r in ThresholdLadder().rungs],
    "mode": EvolutionMode.FORCED.value,
    "train_fraction": 0.8,
    "idle_timeout": DEFAULT_IDLE_TIMEOUT,
    "norm_divisor": DEFAULT_NORM_DIVISOR,
}

FLAG_TARGETS = {
    "epochs": ("hyper", "epochs"),
    "batch_size": ("hyper", "batch_size"),
    "lr": ("hyper", "learning_rate"),
    "seed": ("hyper", "seed"),
    "optimizer": ("hyper", "optimizer"),
    "precision": ("hyper", "precision"),
    "hidden": ("arch", "hidden_dim"),
    "seq_len": ("arch", "seq_len"),
    "mode": ("mode", None),
    "timeout": ("idle_timeout", None),
}


def resolve_config(path: str | None, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON file, then any flags given on the command line."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ClassifierError(f"{path}: invalid JSON: {exc.msg}") from None
        for key, value in user.items():
            if key not in cfg:
                raise ClassifierError(f"{path}: unknown config section {key!r}")
            if isinstance(cfg[key], dict):
                if not isinstance(value, dict):
                    raise ClassifierError(f"{path}: section {key!r} must be an object")
                cfg[key].update(value)
            else:
                cfg[key] = value
    for flag, (section, name) in FLAG_TARGETS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if name is None:
            cfg[section] = value
        else:
            cfg[section][name] = value
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def persist_config(cfg: dict, run_dir: Path) -> str:
    digest = config_digest(cfg)
    cdir = run_dir / "configs"
    cdir.mkdir(parents=True, exist_ok=True)
    (cdir / f"{digest[:16]}.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return digest


def build_stage_config(cfg: dict, stage_id: int) -> StageConfig:
    return StageConfig(
        stage_id=stage_id,
        evolution_mode=EvolutionMode(cfg["mode"]),
        laida=LaidaConfig(**cfg["laida"]),
        judgment=JudgmentConfig(**cfg["judgment"]),
        hyper=Hyperparams.from_dict(cfg["hyper"]),
        ladder=ThresholdLadder(tuple(tuple(r) for r in cfg["ladder"])),
        train_fraction=float(cfg["train_fraction"]),
    )


# helpers

def _existing_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _labels_next_to(path: Path) -> Path:
    return path.parent / "labels.json"


def _load_labelled(path: Path, labels: LabelDict | None, seq_len: int, norm: float):
    records, labels = load_ndjson(path, labels)
    if not records:
        raise EvolutionError(f"{path}: dataset is empty")
    X = feature_matrix(records, seq_len, norm)
    y = None
    if all(r.label is not None for r in records):
        y = np.array([r.label for r in records], dtype=np.int64)
    ts = np.array([r.first_ts / 1_000_000 for r in records])
    return records, X, y, ts, labels


def _model_labels(model) -> LabelDict | None:
    return LabelDict(model.label_dict) if model.label_dict else None


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# subcommands

def cmd_ingest(args, cfg) -> int:
    src = _existing_file(args.input, "input")
    labels = LabelDict.load(args.labels) if args.labels else None
    if src.suffix in (".pcap", ".cap") or args.format == "pcap":
        stats = IngestStats()
        flows = list(assemble_flows(read_pcap(src, stats), float(cfg["idle_timeout"]), stats))
        if args.label is not None:
            if labels is None:
                labels = LabelDict.from_labels([args.label])
            for f in flows:
                f.label = labels.id(args.label)
        summary = asdict(stats)
    else:
        flows, labels = load_ndjson(src, labels)
        summary = {"records": len(flows)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ndjson(flows, out, labels)
    if labels is not None and len(labels):
        labels.save(args.labels_out or out.with_suffix(".labels.json"))
    seq_len = int(cfg["arch"]["seq_len"])
    summary["truncated"] = sum(1 for f in flows if len(f.signed_lengths) > seq_len)
    summary["seq_len"] = seq_len
    _print_json(summary)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    data = _existing_file(args.dataset, "dataset")
    labels = LabelDict.load(_existing_file(args.labels, "label dictionary")) if args.labels else None
    arch = Arch(**cfg["arch"])
    hyper = Hyperparams.from_dict(cfg["hyper"])
    records, X, y, ts, labels = _load_labelled(data, labels, arch.seq_len, float(cfg["norm_divisor"]))
    if y is None:
        raise ClassifierError(f"{data}: training needs every record labelled")
    if len(labels) < 2:
        raise ClassifierError(f"{data}: need at least two classes, found {len(labels)}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = {}
    train_idx = np.arange(len(y))
    if args.test_fraction:
        if not 0.0 < args.test_fraction < 1.0:
            raise UsageError("--test-fraction must lie strictly between 0 and 1")
        train_idx, test_idx = stratified_split(y, 1.0 - args.test_fraction, hyper.seed)
        test_path = out.with_suffix(".test.ndjson")
        write_ndjson([records[i] for i in test_idx], test_path, labels)
        result["test_set"] = str(test_path)
    model = init_model(len(labels), arch, hyper.seed, labels.to_dict())
    model = train(model, X[train_idx], y[train_idx], hyper, ts=float(ts.max()))
    digest = save_checkpoint(model, out)
    labels.save(_labels_next_to(out))
    result.update({
        "checkpoint": str(out),
        "version_id": model.version_id,
        "sha256": digest,
        "final_loss": model.train_provenance["loss_curve"][-1],
        "train_macro_f1": evaluate(model, X[train_idx], y[train_idx]).macro_f1,
    })
    if args.test_fraction:
        result["test_macro_f1"] = evaluate(model, X[test_idx], y[test_idx]).macro_f1
    _print_json(result)
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    if (args.sim_config is None) == (args.preset is None):
        raise UsageError("give either a sim config file or --preset")
    if args.preset:
        sim_cfg = PRESETS[args.preset](seed=args.seed or 0)
    else:
        sim_cfg = SimConfig.load(_existing_file(args.sim_config, "sim config"))
    if args.seed is not None:
        sim_cfg.seed = args.seed
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = sim_cfg.label_dict()
    files = []
    for k in range(sim_cfg.n_stages):
        path = out / f"stage_{k}.ndjson"
        write_ndjson(gen_stage(sim_cfg, k), path, labels)
        files.append(path.name)
    labels.save(out / "labels.json")
    manifest = {
        "initial": files[0],
        "stages": [{"stage_id": k, "path": files[k]} for k in range(1, len(files))],
    }
    (out / "stages.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _print_json({"files": files, "labels": labels.names, "seed": sim_cfg.seed})
    return EXIT_OK


def _read_stage_manifest(path: Path) -> tuple[list[dict], str | None]:
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc.msg}") from None
    stages = d.get("stages") if isinstance(d, dict) else d
    if not stages:
        raise UsageError(f"{path}: stage manifest lists no stages")
    out = []
    for i, s in enumerate(stages):
        if isinstance(s, str):
            s = {"path": s}
        if "path" not in s:
            raise UsageError(f"{path}: stage {i} has no path")
        out.append({"stage_id": int(s.get("stage_id", i + 1)), "path": str(path.parent / s["path"])})
    initial_test = d.get("initial_test") if isinstance(d, dict) else None
    return out, None if initial_test is None else str(path.parent / initial_test)


def cmd_lifecycle(args, cfg, run_dir: Path) -> int:
    stages_spec, manifest_test = _read_stage_manifest(_existing_file(args.manifest, "stage manifest"))
    for s in stages_spec:
        _existing_file(s["path"], f"stage {s['stage_id']} dataset")
    model = load_checkpoint(_existing_file(args.model, "checkpoint"))
    labels = _model_labels(model)
    norm = float(cfg["norm_divisor"])
    initial_test = None
    test_path = args.initial_test or manifest_test
    if test_path is not None:
        _, X, y, _, _ = _load_labelled(_existing_file(test_path, "initial test set"), labels, model.arch.seq_len, norm)
        if y is None:
            raise EvolutionError(f"{test_path}: initial test set must be labelled")
        initial_test = (X, y)
    stages = []
    for s in stages_spec:
        _, X, y, ts, _ = _load_labelled(Path(s["path"]), labels, model.arch.seq_len, norm)
        stages.append((StageStream(X, y, ts), build_stage_config(cfg, s["stage_id"])))
    result = run_lifecycle(model, stages, initial_test=initial_test, run_dir=run_dir,
                           evolve_final=args.evolve_final)
    _print_json({
        "run_dir": str(run_dir),
        "lineage": [m.lineage_level for m in result.models],
        "models": [m.version_id for m in result.models],
        "reports": [str(RunLayout(run_dir).report(r.stage_id)) for r in result.reports],
    })
    return EXIT_OK


def cmd_evolve(args, cfg) -> int:
    model = load_checkpoint(_existing_file(args.model, "checkpoint"))
    pool = load_pool(_existing_file(args.pool, "silver pool"))
    if len(pool) == 0:
        raise EvolutionError(f"{args.pool}: silver pool is empty, nothing to evolve on")
    stage_cfg = build_stage_config(cfg, pool.stage_id)
    train_part, test_part = pool_split(pool, stage_cfg.train_fraction, stage_cfg.hyper.seed)
    X = np.stack([s.features.values for s in train_part])
    y = np.array([s.pseudo_label for s in train_part], dtype=np.int64)
    new = fine_tune(model, X, y, stage_cfg.hyper, ts=max(s.harvested_ts for s in pool.samples))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(new, out)
    if new.label_dict:
        LabelDict(new.label_dict).save(_labels_next_to(out))
    result = {"checkpoint": str(out), "version_id": new.version_id, "lineage_level": new.lineage_level,
              "parent_version": new.parent_version, "sha256": digest, "silver_train_size": len(train_part)}
    if test_part:
        Xt = np.stack([s.features.values for s in test_part])
        yt = np.array([s.pseudo_label for s in test_part], dtype=np.int64)
        result["silver_test_macro_f1"] = evaluate(new, Xt, yt).macro_f1
    if args.initial_test:
        _, Xi, yi, _, _ = _load_labelled(_existing_file(args.initial_test, "initial test set"),
                                         _model_labels(model), model.arch.seq_len, float(cfg["norm_divisor"]))
        result["forgetting_macro_f1"] = evaluate(new, Xi, yi).macro_f1
    _print_json(result)
    return EXIT_OK


def cmd_report(args, run_dir: Path) -> int:
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    layout = RunLayout(run_dir)
    if not (run_dir / "reports").is_dir():
        raise UsageError(f"{run_dir}: no reports directory")
    reports = [StageReport.from_dict(json.loads(p.read_text())) for p in layout.report_paths()]
    summary = json.loads(layout.summary.read_text()) if layout.summary.exists() else None
    if args.format == "json":
        _print_json({"reports": [r.to_dict() for r in reports], "summary": summary})
        return EXIT_OK
    for r in reports:
        ev = r.evolution
        fired = "evolved" if ev is not None and ev.fired else "kept"
        f1 = "n/a" if r.metrics_labeled is None else f"{r.metrics_labeled.macro_f1:.4f}"
        levels = ",".join(str(lv) for _, lv in sorted(r.verdict.per_class.items()))
        print(f"stage {r.stage_id}: {r.n_classified} classified, silver {r.silver_count} "
              f"({100 * r.silver_rate:.2f}%), macro-F1 {f1}, drift [{levels}], {fired} "
              f"{r.model_version_in} -> {r.model_version_out}")
    if summary is not None:
        print()
        print(render_table(summary), end="")
    return EXIT_OK


# argument parsing

def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _add_hyper_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (override the config file)")
    g.add_argument("--epochs", type=_positive_int)
    g.add_argument("--batch-size", type=_positive_int)
    g.add_argument("--lr", type=_positive_float)
    g.add_argument("--seed", type=int)
    g.add_argument("--optimizer", choices=["adam", "amsgrad", "sgd"])
    g.add_argument("--precision", choices=["float32", "float64"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="devo", description="Self-evolving encrypted traffic classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--run-dir", help="run directory (default: $DEVO_RUN_DIR)")
    parser.add_argument("--threads", type=_positive_int, help="cap BLAS/OpenMP threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="pcap or NDJSON in, NDJSON flow dataset out")
    p.add_argument("input")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--format", choices=["auto", "pcap", "ndjson"], default="auto")
    p.add_argument("--timeout", type=_positive_float, help="flow idle timeout in seconds")
    p.add_argument("--seq-len", type=_positive_int)
    p.add_argument("--label", help="class name given to every flow of a pcap")
    p.add_argument("--labels", help="existing label dictionary")
    p.add_argument("--labels-out", help="where to write the label dictionary")
    p.add_argument("--config")

    p = sub.add_parser("train", help="initial training on a labelled dataset")
    p.add_argument("dataset")
    p.add_argument("-o", "--out", required=True, help="checkpoint path")
    p.add_argument("--config")
    p.add_argument("--labels", help="label dictionary (default: built from the dataset)")
    p.add_argument("--test-fraction", type=float, default=0.0,
                   help="hold out a stratified test split, written next to the checkpoint")
    p.add_argument("--hidden", type=_positive_int)
    p.add_argument("--seq-len", type=_positive_int)
    _add_hyper_flags(p)

    p = sub.add_parser("simulate", help="write one synthetic NDJSON dataset per stage")
    p.add_argument("sim_config", nargs="?")
    p.add_argument("--preset", choices=sorted(PRESETS), help="built-in layout instead of a config file")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("lifecycle", help="run stages in order, evolving between them")
    p.add_argument("manifest", help="JSON stage manifest")
    p.add_argument("--model", required=True, help="initial checkpoint")
    p.add_argument("--config")
    p.add_argument("--mode", choices=[m.value for m in EvolutionMode])
    p.add_argument("--initial-test", help="labelled held-out set for the forgetting check")
    p.add_argument("--evolve-final", action="store_true", help="also evolve after the last stage")
    _add_hyper_flags(p)

    p = sub.add_parser("evolve", help="fine-tune a checkpoint on a saved silver pool")
    p.add_argument("pool")
    p.add_argument("--model", required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--config")
    p.add_argument("--initial-test")
    _add_hyper_flags(p)

    p = sub.add_parser("report", help="render the stage reports of a run")
    p.add_argument("run_dir_pos", nargs="?", metavar="run_dir")
    p.add_argument("--format", choices=["table", "json"], default="table")
    return parser


def _run_dir(args, required: bool) -> Path | None:
    chosen = getattr(args, "run_dir_pos", None) or args.run_dir or os.environ.get("DEVO_RUN_DIR")
    if chosen:
        return Path(chosen)
    if required:
        return Path("runs") / time.strftime("run-%Y%m%dT%H%M%SZ", time.gmtime())
    return None


def _dispatch(args) -> tuple[int, dict | None, Path | None]:
    cfg = None
    if args.command in ("ingest", "train", "lifecycle", "evolve"):
        cfg = resolve_config(args.config, args)
    if args.command == "ingest":
        return cmd_ingest(args, cfg), cfg, _run_dir(args, False)
    if args.command == "train":
        return cmd_train(args, cfg), cfg, _run_dir(args, False)
    if args.command == "simulate":
        return cmd_simulate(args, None), None, _run_dir(args, False)
    if args.command == "lifecycle":
        run_dir = _run_dir(args, True)
        return cmd_lifecycle(args, cfg, run_dir), cfg, run_dir
    if args.command == "evolve":
        return cmd_evolve(args, cfg), cfg, _run_dir(args, False)
    if args.command == "report":
        run_dir = _run_dir(args, False)
        if run_dir is None:
            raise UsageError("report needs a run directory (argument, --run-dir or DEVO_RUN_DIR)")
        return cmd_report(args, run_dir), None, None
    raise UsageError(f"unknown command {args.command}")


RUNTIME_ERRORS = (
    IngestError, ClassifierError, CheckpointError, EvolutionError, SimConfigError,
    SilverPoolError, DriftConfigError, ValueError, KeyError, OSError,
)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    cfg, run_dir = None, None
    with limiter:
        try:
            status, cfg, run_dir = _dispatch(args)
        except UsageError as exc:
            print(f"devo {args.command}: {exc}", file=sys.stderr)
            status = EXIT_USAGE
        except RUNTIME_ERRORS as exc:
            print(f"devo {args.command}: error: {exc}", file=sys.stderr)
            status = EXIT_FAILURE
    if run_dir is None and args.command != "report":
        explicit = args.run_dir or os.environ.get("DEVO_RUN_DIR")
        run_dir = Path(explicit) if explicit else None
    if run_dir is not None and status != EXIT_USAGE:
        manifest = RunManifest.load_or_create(run_dir)
        digest = persist_config(cfg, run_dir) if cfg is not None else None
        manifest.record(["devo", *argv], status, digest)
        manifest.save(run_dir)
    return status


if __name__ == "__main__":
    sys.exit(main())
