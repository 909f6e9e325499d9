"""Command-line driver: synth, train, eval, gradcheck and ablate."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from .attention import ATTENTIONS
from .datagen import (
    SynthConfig,
    dataset_header,
    file_digest,
    load_checkpoint,
    read_dataset,
    save_checkpoint,
    synthesize,
    write_dataset,
)
from .errors import ConfigError, DataError, NumericalError, SquatError
from .evaluation import evaluate, evaluate_dump, predict_all, read_predictions, write_predictions
from .gradcheck import gradcheck, small_config
from .model import EDGE_SOURCES, ModelConfig, SquatModel
from .scenes import TASKS, task_view
from .training import TrainSchedule, train, write_trace

log = logging.getLogger("squat")

# attention subsets swept by the quad-attention ablation
ATTENTION_SUBSETS: tuple[tuple[str, ...], ...] = (
    ("n2n", "n2e"),
    ("n2n", "n2e", "e2e"),
    ("n2n", "n2e", "e2n"),
    ("e2n", "e2e"),
    ("n2e", "e2n", "e2e"),
    ("n2n", "e2n", "e2e"),
    ("n2n", "n2e", "e2n", "e2e"),
)

TASK_DEFAULTS = {
    "sgdet": {"rho_train": 0.7, "rho_infer": 0.35, "layers": 3},
    "sgcls": {"rho_train": 0.9, "rho_infer": 0.9, "layers": 2},
    "predcls": {"rho_train": 0.9, "rho_infer": 0.9, "layers": 2},
}


def _fields_schema(cls, skip: Sequence[str] = ()) -> dict[str, Any]:
    kinds = {int: "integer", float: "number", bool: "boolean", str: "string"}
    props: dict[str, Any] = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        t = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(str(f.type))
        props[f.name] = {"type": kinds[t]} if t in kinds else {"type": "array"}
    return {"type": "object", "properties": props, "additionalProperties": False}


_RHO = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_MASK = {"type": "array", "items": {"enum": list(ATTENTIONS)}, "uniqueItems": True}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"enum": list(TASKS)},
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "rho_train": _RHO,
        "rho_infer": _RHO,
        "edge_source": {"enum": list(EDGE_SOURCES)},
        "esm_mode": {"enum": ["shared", "distinct"]},
        "attention": _MASK,
        "layers": {"type": "integer", "minimum": 1},
        "eval_scenes": {"type": "integer", "minimum": 0},
        "model": _fields_schema(ModelConfig, ("layers", "esm_mode", "attention", "d_v", "num_predicates")),
        "schedule": _fields_schema(TrainSchedule, ("rho_train", "seed", "edge_source")),
        "synth": _fields_schema(SynthConfig, ("seed",)),
        "ablate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "edge_sources": {"type": "array", "items": {"enum": list(EDGE_SOURCES)}, "minItems": 1},
                "esm_modes": {"type": "array", "items": {"enum": ["shared", "distinct"]}, "minItems": 1},
                "attention_masks": {"type": "array", "items": _MASK, "minItems": 1},
            },
        },
    },
}


@dataclasses.dataclass
class RunConfig:
    task: str = "sgdet"
    seed: int = 0
    workers: int = 1
    rho_train: float | None = None
    rho_infer: float | None = None
    edge_source: str = "esm"
    esm_mode: str = "distinct"
    attention: tuple[str, ...] = ATTENTIONS
    layers: int | None = None
    eval_scenes: int = 50
    model: dict[str, Any] = dataclasses.field(default_factory=dict)
    schedule: dict[str, Any] = dataclasses.field(default_factory=dict)
    synth: dict[str, Any] = dataclasses.field(default_factory=dict)
    ablate: dict[str, Any] = dataclasses.field(default_factory=dict)

    def resolve(self) -> "RunConfig":
        """Fill task-dependent defaults and check cross-field consistency."""
        if self.task not in TASKS:
            raise ConfigError(f"task: expected one of {TASKS}, got {self.task!r}")
        d = TASK_DEFAULTS[self.task]
        if self.rho_train is None:
            self.rho_train = d["rho_train"]
        if self.rho_infer is None:
            self.rho_infer = d["rho_infer"]
        if self.layers is None:
            self.layers = d["layers"]
        self.attention = tuple(a for a in ATTENTIONS if a in set(self.attention))
        check_mask(self.attention, self.edge_source)
        for name in ("rho_train", "rho_infer"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ConfigError(f"{name}: must lie in (0, 1], got {v}")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        return self

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["attention"] = list(self.attention)
        return out

    def model_config(self, d_v: int, num_predicates: int) -> ModelConfig:
        return ModelConfig(
            **self.model, d_v=d_v, num_predicates=num_predicates, layers=self.layers,
            esm_mode=self.esm_mode, attention=self.attention,
        )

    def train_schedule(self) -> TrainSchedule:
        return TrainSchedule(**self.schedule, rho_train=self.rho_train, seed=self.seed, edge_source=self.edge_source)

    def synth_config(self, num_scenes: int | None = None) -> SynthConfig:
        kw = dict(self.synth, seed=self.seed)
        if num_scenes is not None:
            kw["num_scenes"] = num_scenes
        return SynthConfig.from_dict(kw)


def check_mask(mask: Sequence[str], edge_source: str) -> None:
    if not mask:
        raise ConfigError("attention: the mask must name at least one attention")
    if edge_source == "none" and "n2n" not in mask:
        raise ConfigError(
            "attention: with edge_source none only node-to-node attention runs, so the mask must include n2n"
        )


def load_config_file(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: config file not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    validate_config(doc, path)
    return doc


def validate_config(doc: Any, source: str = "config") -> None:
    err = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(doc))
    if err is not None:
        where = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ConfigError(f"{source}: {where}: {err.message}")


def build_run_config(args: argparse.Namespace) -> RunConfig:
    doc = load_config_file(getattr(args, "config", None))
    flags = {
        "task": args.task, "seed": args.seed, "workers": args.workers,
        "rho_train": args.rho_train, "rho_infer": args.rho_infer, "edge_source": args.edge_source,
        "esm_mode": args.esm_mode, "layers": args.layers,
        "attention": parse_mask(args.attn_mask) if args.attn_mask is not None else None,
    }
    merged = {**doc, **{k: v for k, v in flags.items() if v is not None}}
    for section in ("schedule", "synth"):
        merged[section] = dict(doc.get(section, {}))
    if getattr(args, "iters", None) is not None:
        merged["schedule"]["main_iters"] = args.iters
    if getattr(args, "pretrain_iters", None) is not None:
        merged["schedule"]["esm_pretrain_iters"] = args.pretrain_iters
    for flag, key in (("density", "relation_density"), ("distractor_rate", "distractor_rate"), ("num_scenes", "num_scenes")):
        if getattr(args, flag, None) is not None:
            merged["synth"][key] = getattr(args, flag)
    if "attention" in merged:
        merged["attention"] = tuple(merged["attention"])
    return RunConfig(**merged).resolve()


def parse_mask(text: str) -> tuple[str, ...]:
    """'n2n+e2e' -> ('n2n', 'e2e'); 'all' -> every attention."""
    if text == "all":
        return ATTENTIONS
    parts = tuple(p.strip().lower() for p in text.split("+") if p.strip())
    bad = [p for p in parts if p not in ATTENTIONS]
    if bad:
        raise ConfigError(f"--attn-mask: unknown attention {bad[0]!r}; choose from {ATTENTIONS}")
    return parts


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _read(path: str):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise DataError(f"{path}: dataset file not found") from None


# ---------------------------------------------------------------- commands

def cmd_synth(args, rc: RunConfig) -> int:
    out = Path(args.out)
    echo = rc.to_dict()
    for split, count in (("train", None), ("eval", rc.eval_scenes)):
        cfg = rc.synth_config(count)
        scenes = synthesize(cfg, split)
        header = dataset_header(cfg.d_v, cfg.num_object_classes, cfg.num_predicate_classes, split=split, synth=cfg.to_dict(), run=echo)
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(scenes, out / f"{split}.ndjson", header)
        pairs = sum(len(s.gt_objects) * (len(s.gt_objects) - 1) for s in scenes)
        rels = sum(len(s.gt_relations) for s in scenes)
        print(f"{split}: {len(scenes)} scenes, {rels} relations, relation/pair ratio {rels / max(pairs, 1):.4f} -> {out / f'{split}.ndjson'}")
    return 0


def _model_for(rc: RunConfig, header: dict[str, Any]) -> SquatModel:
    return SquatModel(rc.model_config(int(header["d_v"]), int(header["num_predicate_classes"])), seed=rc.seed)


def cmd_train(args, rc: RunConfig) -> int:
    header, scenes = _read(args.data)
    model = _model_for(rc, header)
    schedule = rc.train_schedule()
    result = train(scenes, schedule, model, rc.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"run": rc.to_dict(), "schedule": schedule.to_dict(), "data": str(args.data), "data_sha256": file_digest(args.data)}
    iters = schedule.esm_pretrain_iters + schedule.main_iters
    save_checkpoint(model, out / "checkpoint.json", iteration=iters, extra=echo)
    write_trace(result.trace, out / "trace.csv", "config: " + json.dumps(echo, sort_keys=True))
    main = result.totals(2)
    if len(main):
        tenth = max(1, len(main) // 10)
        print(f"trained {iters} iterations; loss first decile {main[:tenth].mean():.4f}, last decile {main[-tenth:].mean():.4f}")
    print(f"checkpoint -> {out / 'checkpoint.json'}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    header, scenes = _read(args.data)
    num_predicates = int(header["num_predicate_classes"])
    echo: dict[str, Any] = {"run": rc.to_dict(), "data": str(args.data), "data_sha256": file_digest(args.data)}
    if args.predictions:
        try:
            preds = read_predictions(args.predictions)
        except FileNotFoundError:
            raise DataError(f"{args.predictions}: prediction file not found") from None
        report = evaluate_dump(preds, scenes, num_predicates)
        echo["predictions_sha256"] = file_digest(args.predictions)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        try:
            model, _ = load_checkpoint(args.checkpoint)
        except FileNotFoundError:
            raise DataError(f"{args.checkpoint}: checkpoint not found") from None
        if model.config.d_v != int(header["d_v"]) or model.config.num_predicates != num_predicates:
            raise DataError(
                f"checkpoint expects d_v={model.config.d_v}, {model.config.num_predicates} predicates; "
                f"dataset has d_v={header['d_v']}, {num_predicates} predicates"
            )
        report = evaluate(model, scenes, rc.task, rc.rho_infer, rc.edge_source, workers=rc.workers)
        echo["checkpoint_sha256"] = file_digest(args.checkpoint)
        if args.dump_predictions:
            Path(args.dump_predictions).parent.mkdir(parents=True, exist_ok=True)
            views = [v for v in (task_view(s, rc.task) for s in scenes) if v.n >= 2]
            write_predictions(predict_all(model, views, rc.rho_infer, rc.edge_source, rc.workers), args.dump_predictions)
    report.config = echo
    out = Path(args.out)
    _write(out / "report.json", report.to_json())
    table = "# config: " + json.dumps(echo, sort_keys=True) + "\n" + report.to_table()
    _write(out / "report.txt", table)
    print(report.to_table(), end="")
    return 0


def cmd_gradcheck(args, rc: RunConfig) -> int:
    if args.d > 16 or args.n > 4:
        raise ConfigError("gradcheck runs on small models only: --d <= 16 and --n <= 4")
    if args.layers is None:
        args.layers = 2
    cfg = small_config(d=args.d, layers=args.layers, esm_mode=rc.esm_mode)
    cfg.attention = rc.attention
    model = SquatModel(cfg, seed=rc.seed)
    report = gradcheck(model, n=args.n, tol=args.tol, entries_per_tensor=args.entries, seed=rc.seed)
    print(report.to_table())
    if args.out:
        doc = {
            "config": {"run": rc.to_dict(), "d": args.d, "n": args.n, "layers": args.layers, "tol": args.tol},
            "worst": report.worst, "pce_esm_max": report.pce_esm_max,
            "esm_grad_norm": report.esm_grad_norm, "passed": report.passed,
        }
        _write(Path(args.out), _dump(doc))
    if not report.passed:
        raise NumericalError(f"gradcheck failed for groups {report.failures or ['isolation']}")
    return 0


def ablation_axes(rc: RunConfig, args) -> tuple[list[str], list[str], list[tuple[str, ...]]]:
    ab = rc.ablate
    sources = args.edge_sources.split(",") if args.edge_sources else ab.get("edge_sources", list(EDGE_SOURCES))
    modes = args.esm_modes.split(",") if args.esm_modes else ab.get("esm_modes", [rc.esm_mode])
    if args.attn_masks == "subsets":
        masks = list(ATTENTION_SUBSETS)
    elif args.attn_masks:
        masks = [parse_mask(m) for m in args.attn_masks.split(",")]
    else:
        masks = [tuple(m) for m in ab.get("attention_masks", [rc.attention])]
    for s in sources:
        if s not in EDGE_SOURCES:
            raise ConfigError(f"--edge-sources: unknown edge source {s!r}")
    for m in modes:
        if m not in ("shared", "distinct"):
            raise ConfigError(f"--esm-modes: unknown mode {m!r}")
    return sources, modes, [tuple(a for a in ATTENTIONS if a in set(m)) for m in masks]


def cmd_ablate(args, rc: RunConfig) -> int:
    _, train_scenes = _read(args.train_data)
    header, eval_scenes = _read(args.eval_data)
    sources, modes, masks = ablation_axes(rc, args)
    rows = []
    for source, mode, mask in itertools.product(sources, modes, masks):
        variant = dataclasses.replace(rc, edge_source=source, esm_mode=mode, attention=mask)
        row: dict[str, Any] = {"edge_source": source, "esm_mode": mode, "attention": "+".join(mask)}
        try:
            check_mask(mask, source)
        except ConfigError as e:
            row["status"] = f"skipped: {e}"
            rows.append(row)
            continue
        model = _model_for(variant, header)
        train(train_scenes, variant.train_schedule(), model, rc.task)
        report = evaluate(model, eval_scenes, rc.task, rc.rho_infer, source, workers=rc.workers)
        row.update({f"mR@{k}": v for k, v in report.mean_recall.items()})
        row.update({f"R@{k}": v for k, v in report.recall.items()})
        row["status"] = "ok"
        rows.append(row)
        log.info("variant %s/%s/%s mR@50 %.4f", source, mode, row["attention"], report.mean_recall[50])
    out = Path(args.out)
    echo = {"run": rc.to_dict(), "train_sha256": file_digest(args.train_data), "eval_sha256": file_digest(args.eval_data)}
    _write(out / "ablation.json", _dump({"config": echo, "rows": rows}))
    cols = ["edge_source", "esm_mode", "attention", "mR@20", "mR@50", "mR@100", "R@20", "R@50", "R@100", "status"]
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(echo, sort_keys=True) + "\n")
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (f"{r[c]:.6f}" if isinstance(r.get(c), float) else r.get(c, "")) for c in cols})
    _write(out / "ablation.csv", buf.getvalue())
    print(format_ablation(rows))
    return 0


def format_ablation(rows: list[dict[str, Any]]) -> str:
    head = f"{'edges':<7}{'esm':<9}{'attention':<20}{'mR@20':>8}{'mR@50':>8}{'mR@100':>8}"
    lines = [head]
    for r in rows:
        vals = "".join(f"{100 * r[f'mR@{k}']:8.2f}" if f"mR@{k}" in r else f"{'-':>8}" for k in (20, 50, 100))
        lines.append(f"{r['edge_source']:<7}{r['esm_mode']:<9}{r['attention']:<20}{vals}")
    return "\n".join(lines)


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors share the config exit code
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run config; flags override its values")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--workers", type=int, help="worker processes for per-scene evaluation")
    shared.add_argument("--task", choices=TASKS)
    shared.add_argument("--rho-train", type=float)
    shared.add_argument("--rho-infer", type=float)
    shared.add_argument("--edge-source", choices=EDGE_SOURCES)
    shared.add_argument("--esm-mode", choices=("shared", "distinct"))
    shared.add_argument("--attn-mask", help="attentions joined by '+', e.g. n2n+n2e, or 'all'")
    shared.add_argument("--layers", type=int)

    p = _Parser(prog="squat", description="Scene graph generation with edge selection and quad attention.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[shared], help="write synthetic train/eval datasets")
    s.add_argument("--out", default="data")
    s.add_argument("--num-scenes", type=int)
    s.add_argument("--density", type=float, help="relation density")
    s.add_argument("--distractor-rate", type=float)

    t = sub.add_parser("train", parents=[shared], help="two-phase training; writes checkpoint and loss trace")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default="run")
    t.add_argument("--iters", type=int, help="main-phase iterations")
    t.add_argument("--pretrain-iters", type=int, help="edge-selection pretraining iterations")

    e = sub.add_parser("eval", parents=[shared], help="score a checkpoint or a prediction dump")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="evaluate a prediction dump instead of running a model")
    e.add_argument("--dump-predictions", help="also write the model's ranked triplets here")
    e.add_argument("--out", default="report")

    g = sub.add_parser("gradcheck", parents=[shared], help="finite-difference check of every parameter group")
    g.add_argument("--d", type=int, default=16)
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--entries", type=int, default=10, help="entries probed per parameter tensor")
    g.add_argument("--out", help="optional JSON report path")

    a = sub.add_parser("ablate", parents=[shared], help="train and evaluate a grid of model variants")
    a.add_argument("--train-data", required=True)
    a.add_argument("--eval-data", required=True)
    a.add_argument("--out", default="ablation")
    a.add_argument("--edge-sources", help="comma list from none,full,esm,oracle")
    a.add_argument("--esm-modes", help="comma list from shared,distinct")
    a.add_argument("--attn-masks", help="comma list of '+'-joined masks, or 'subsets' for the seven standard subsets")
    a.add_argument("--iters", type=int, help="main-phase iterations per variant")
    a.add_argument("--pretrain-iters", type=int)
    return p


def _setup_logging() -> None:
    level = os.environ.get("SQUAT_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        raise ConfigError(f"SQUAT_LOG must be error, info or debug, got {level!r}")
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s", force=True)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        try:
            rc = build_run_config(args)
        except (TypeError, ValueError) as e:
            if isinstance(e, SquatError):
                raise
            raise ConfigError(str(e)) from None
        return COMMANDS[args.command](args, rc)
    except SquatError as e:
        print(f"squat {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"squat {args.command}: DataError: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
