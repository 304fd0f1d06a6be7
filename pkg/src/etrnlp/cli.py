"""Command-line entry point: ``etrnlp <command> --config CONFIG [--out DIR] ...``.

Commands: generate, train, eval, sweep-gamma, search-primitives, cka, report.
Exit codes: 0 success, 1 runtime failure, 2 configuration/validation failure.
Existing outputs are never overwritten unless ``--force`` is given.

An experiment config is a JSON object with ``version: 1`` and the sections
``dataset``, ``arch``, ``train``, ``diagnostics``, ``sweep``, ``search`` plus
``name``, ``baseline``, ``seeds`` and ``output_dir``. Unknown keys anywhere are
rejected.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import itertools
import json
import shutil
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import ShapesMtConfig, generate_shapes_mt, load_dataset, verify_dataset
from .metrics import MetricRecord, delta_p, heatmap_text
from .nets import ArchConfig, ArchError, build_network, count_params_flops
from .primitives import DEFAULT_PRIMITIVES, KINDS, PrimitiveConfigError, PrimitiveSpec
from .train import (NonFiniteLossError, TrainConfig, evaluate, layer_names, rows_to_csv,
                    run_gamma_sweep, task_pair_cka, train)

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


class RunError(RuntimeError):
    """Runtime failure such as an output collision; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config


@dataclasses.dataclass
class ExperimentConfig:
    dataset: ShapesMtConfig
    dataset_path: Optional[str]
    dataset_seed: int
    arch: ArchConfig
    train: TrainConfig
    seeds: list
    name: str = "run"
    baseline: bool = False
    output_dir: Optional[str] = None
    cka_layers: Optional[list] = None
    cka_steps: int = 8
    gammas: tuple = (0.25, 0.5, 0.75, 0.9, 1.0)
    search_layer_kind: str = "nlp"


_TOP_KEYS = {"version", "name", "baseline", "seeds", "output_dir", "dataset", "arch", "train",
             "diagnostics", "sweep", "search"}


def _check_keys(section: dict, allowed, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    for key in section:
        if key not in allowed:
            full = f"{where}.{key}" if where else key
            raise ConfigError(f"unknown key {full!r}")


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, raw: dict, where: str, convert: Optional[dict] = None):
    _check_keys(raw, _fields(cls), where)
    kwargs = dict(raw)
    for key, fn in (convert or {}).items():
        if key in kwargs:
            kwargs[key] = fn(kwargs[key])
    try:
        obj = cls(**kwargs)
        obj.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return obj


def _primitive(raw: Any) -> PrimitiveSpec:
    if isinstance(raw, str):
        raw = {"kind": raw}
    _check_keys(raw, _fields(PrimitiveSpec), "arch.primitives[]")
    try:
        spec = PrimitiveSpec(**raw)
        spec.validate()
    except (PrimitiveConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"arch.primitives: {exc}") from exc
    return spec


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config object completely before any work starts."""
    _check_keys(raw, _TOP_KEYS, "")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, got {raw.get('version')!r}")
    ds_raw = dict(raw.get("dataset", {}))
    path = ds_raw.pop("path", None)
    ds_seed = ds_raw.pop("seed", 0)
    if not isinstance(ds_seed, int):
        raise ConfigError("dataset.seed: expected an integer")
    dcfg = _build(ShapesMtConfig, ds_raw, "dataset",
                  {"coupled_pairs": lambda v: tuple(tuple(p) for p in v)})
    arch_raw = dict(raw.get("arch", {}))
    arch_raw.setdefault("heads", list(dcfg.head_kinds))
    arch_raw.setdefault("image_size", dcfg.image_size)
    acfg = _build(ArchConfig, arch_raw, "arch", {
        "widths": tuple, "heads": tuple,
        "layer_kind": lambda v: v if isinstance(v, str) else tuple(v),
        "stage_gammas": lambda v: None if v is None else tuple(v),
        "primitives": lambda v: tuple(_primitive(p) for p in v),
    })
    if acfg.n_tasks != len(dcfg.head_kinds) or tuple(acfg.heads) != dcfg.head_kinds:
        raise ConfigError(f"arch.heads: {list(acfg.heads)} do not match dataset tasks "
                          f"{list(dcfg.head_kinds)}")
    tcfg = _build(TrainConfig, dict(raw.get("train", {})), "train")
    seeds = raw.get("seeds", [tcfg.seed])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicate entries")
    diag = raw.get("diagnostics", {})
    _check_keys(diag, {"cka_layers", "cka_steps"}, "diagnostics")
    sweep = raw.get("sweep", {})
    _check_keys(sweep, {"gammas"}, "sweep")
    search = raw.get("search", {})
    _check_keys(search, {"layer_kind"}, "search")
    cfg = ExperimentConfig(
        dataset=dcfg, dataset_path=path, dataset_seed=ds_seed, arch=acfg, train=tcfg,
        seeds=list(seeds), name=str(raw.get("name", "run")), baseline=bool(raw.get("baseline", False)),
        output_dir=raw.get("output_dir"), cka_layers=diag.get("cka_layers"),
        cka_steps=int(diag.get("cka_steps", 8)),
        gammas=tuple(float(g) for g in sweep.get("gammas", (0.25, 0.5, 0.75, 0.9, 1.0))),
        search_layer_kind=str(search.get("layer_kind", "nlp")),
    )
    if cfg.cka_steps < 2:
        raise ConfigError("diagnostics.cka_steps: must be >= 2")
    if not all(0.0 <= g <= 1.0 for g in cfg.gammas):
        raise ConfigError(f"sweep.gammas: values must lie in [0, 1], got {list(cfg.gammas)}")
    if cfg.search_layer_kind not in ("nlp", "etr_nlp"):
        raise ConfigError("search.layer_kind: must be 'nlp' or 'etr_nlp'")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw)


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = args.out or cfg.output_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set output_dir")
    return Path(out)


def _dataset_dir(cfg: ExperimentConfig, out: Path) -> Path:
    return Path(cfg.dataset_path) if cfg.dataset_path else out / "data"


def _claim(path: Path, force: bool) -> None:
    """Refuse to reuse an existing output unless forced (then clear it)."""
    if path.exists():
        if not force:
            raise RunError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


def _write(path: Path, text: str, force: bool) -> None:
    _claim(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_data(cfg: ExperimentConfig, out: Path):
    root = _dataset_dir(cfg, out)
    if not (root / "manifest.json").exists():
        raise RunError(f"dataset not found at {root}; run 'generate' first")
    problems = verify_dataset(root)
    if problems:
        raise RunError(f"dataset at {root} failed verification: {problems[0]}")
    ds = load_dataset(root)
    if [t.kind for t in ds.tasks] != list(cfg.arch.heads):
        raise ConfigError(f"dataset at {root} has tasks {[t.kind for t in ds.tasks]}, "
                          f"arch expects {list(cfg.arch.heads)}")
    return ds


def _seed_cfg(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=seed)


def _summarise(cfg: ExperimentConfig, evals: list, net_info: dict) -> dict:
    """Mean and std over seeds of every scalar metric and of the Δp record."""
    metrics = {}
    for key, value in evals[0].items():
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            vals = [float(e[key]) for e in evals]
            metrics[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": vals}
    records = [e["record"] for e in evals]
    mean_record = MetricRecord([[(n, float(np.mean([r.tasks[t][i][1] for r in records])), hb)
                                 for i, (n, _, hb) in enumerate(task)]
                                for t, task in enumerate(records[0].tasks)])
    return {"name": cfg.name, "baseline": cfg.baseline, "layer_kind": cfg.arch.layer_kind,
            "gamma": cfg.arch.gamma, "seeds": cfg.seeds, "learnable": net_info["learnable"],
            "frozen": net_info["frozen"], "macs": net_info["macs"], "metrics": metrics,
            "record": mean_record.to_json()}


def _fmt(mean: float, std: float) -> str:
    return f"{mean:.4f}±{std:.4f}"


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(r, widths))) for r in rows) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args, cfg)
    root = _dataset_dir(cfg, out)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        same = manifest.get("config") == cfg.dataset.to_dict() and manifest.get("seed") == cfg.dataset_seed
        if same and not verify_dataset(root) and not args.force:
            print(f"up to date: {root} (checksum {manifest['checksum']})")
            return 0
        if not args.force:
            raise RunError(f"{root} holds a different or damaged dataset; pass --force to regenerate")
    if root.exists() and args.force:
        shutil.rmtree(root)
    manifest = generate_shapes_mt(cfg.dataset, cfg.dataset_seed, root)
    print(f"generated {cfg.dataset.num_samples} samples in {root} (checksum {manifest['checksum']})")
    return 0


def _train_seed(cfg: ExperimentConfig, ds, seed: int, run_dir: Path, args) -> dict:
    ckpt = run_dir / "checkpoint.etrn"
    resume = None
    if args.resume and ckpt.exists():
        resume = ckpt
    else:
        _claim(run_dir, args.force)
    run_dir.mkdir(parents=True, exist_ok=True)
    net = build_network(cfg.arch, seed=seed)
    tc = _seed_cfg(cfg, seed)
    history, _ = train(net, ds, tc, checkpoint_path=ckpt, resume_from=resume,
                       stop_after=args.stop_after)
    (run_dir / "history.csv").write_text(history.to_csv())
    finished = len(history.loss) >= tc.epochs
    result = {"seed": seed, "epochs_done": len(history.loss), "finished": finished}
    if finished:
        ev = evaluate(net, ds, "test")
        result["eval"] = ev
        payload = {k: v for k, v in ev.items() if k != "record"}
        payload["record"] = ev["record"].to_json()
        (run_dir / "metrics.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return result


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args, cfg)
    ds = _load_data(cfg, out)
    results = []
    for seed in cfg.seeds:
        r = _train_seed(cfg, ds, seed, out / f"seed_{seed}", args)
        results.append(r)
        status = "done" if r["finished"] else f"stopped after epoch {r['epochs_done']}"
        headline = f", headline {r['eval']['headline']:.4f}" if r["finished"] else ""
        print(f"seed {seed}: {status}{headline}")
    if all(r["finished"] for r in results):
        info = count_params_flops(build_network(cfg.arch, seed=cfg.seeds[0]))
        summary = _summarise(cfg, [r["eval"] for r in results], info)
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        rows = [["metric", "mean±std"]] + [[k, _fmt(v["mean"], v["std"])]
                                          for k, v in sorted(summary["metrics"].items())]
        (out / "summary.txt").write_text(_aligned(rows))
        print(_aligned(rows), end="")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args, cfg)
    ds = _load_data(cfg, out)
    evals = []
    for seed in cfg.seeds:
        ckpt = out / f"seed_{seed}" / "checkpoint.etrn"
        if not ckpt.exists():
            raise RunError(f"missing checkpoint {ckpt}; run 'train' first")
        net = build_network(cfg.arch, seed=seed)
        net.load_state_dict({k: v for k, v in load_checkpoint(ckpt).items()
                             if k.startswith(("param.", "buffer."))})
        ev = evaluate(net, ds, args.split)
        evals.append(ev)
        payload = {k: v for k, v in ev.items() if k != "record"}
        payload["record"] = ev["record"].to_json()
        _write(out / f"seed_{seed}" / f"eval_{args.split}.json",
               json.dumps(payload, indent=1, sort_keys=True) + "\n", args.force)
        print(f"seed {seed}: {args.split} headline {ev['headline']:.4f}")
    return 0


def cmd_sweep_gamma(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args, cfg)
    target = out / "gamma_sweep.csv"
    _claim(target, args.force)
    ds = _load_data(cfg, out)
    rows = run_gamma_sweep(cfg.arch, ds, cfg.train, cfg.gammas, cfg.seeds)
    _write(target, rows_to_csv(rows), True)
    print(rows_to_csv(rows), end="")
    return 0


def primitive_subsets() -> list[tuple[str, ...]]:
    """All 31 non-empty subsets of the primitive kinds, smallest first."""
    return [c for r in range(1, len(KINDS) + 1) for c in itertools.combinations(KINDS, r)]


def subset_specs(subset) -> tuple:
    """Primitive specs for a subset: the default set's settings where it has one."""
    defaults = {p.kind: p for p in DEFAULT_PRIMITIVES}
    return tuple(defaults.get(k, PrimitiveSpec(k)) for k in subset)


def search_rows(cfg: ExperimentConfig, ds, subsets=None) -> list[dict]:
    """Train the conv baseline and every subset over all seeds; rows ranked by Δp."""
    subsets = primitive_subsets() if subsets is None else subsets

    def run(arch: ArchConfig):
        evals = []
        for seed in cfg.seeds:
            net = build_network(arch, seed=seed)
            train(net, ds, _seed_cfg(cfg, seed))
            evals.append(evaluate(net, ds, "test"))
        info = count_params_flops(build_network(arch, seed=cfg.seeds[0]))
        return _summarise(dataclasses.replace(cfg, arch=arch), evals, info)

    base_arch = dataclasses.replace(cfg.arch, layer_kind="conv")
    base = run(base_arch)
    base_record = MetricRecord.from_json(base["record"])
    entries = [("conv", (), base)]
    for subset in subsets:
        arch = dataclasses.replace(cfg.arch, layer_kind=cfg.search_layer_kind,
                                   primitives=subset_specs(subset))
        entries.append(("+".join(subset), subset, run(arch)))
    rows = []
    for label, subset, summ in entries:
        row = {"config": label}
        row.update({k: int(k in subset) for k in KINDS})
        row["learnable"] = summ["learnable"]
        row["metric_mean"] = summ["metrics"]["headline"]["mean"]
        row["metric_std"] = summ["metrics"]["headline"]["std"]
        row["delta_p"] = 0.0 if not subset else delta_p(MetricRecord.from_json(summ["record"]),
                                                        base_record)
        rows.append(row)
    # stable sort keeps enumeration order among ties
    rows.sort(key=lambda r: -r["delta_p"])
    for i, r in enumerate(rows):
        r["rank"] = i + 1
    return [{"rank": r.pop("rank"), **r} for r in rows]


def cmd_search_primitives(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args, cfg)
    target = out / "primitive_search.csv"
    _claim(target, args.force)
    ds = _load_data(cfg, out)
    rows = search_rows(cfg, ds)
    _write(target, rows_to_csv(rows), True)
    print(rows_to_csv(rows), end="")
    return 0


def cmd_cka(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args, cfg)
    seed = cfg.seeds[0]
    ckpt = Path(args.checkpoint) if args.checkpoint else out / f"seed_{seed}" / "checkpoint.etrn"
    if not ckpt.exists():
        raise RunError(f"missing checkpoint {ckpt}")
    ds = _load_data(cfg, out)
    net = build_network(cfg.arch, seed=seed)
    net.load_state_dict({k: v for k, v in load_checkpoint(ckpt).items()
                         if k.startswith(("param.", "buffer."))})
    available = layer_names(net)
    layers = cfg.cka_layers or available
    unknown = [l for l in layers if l not in available]
    if unknown:
        raise ConfigError(f"diagnostics.cka_layers: unknown layer {unknown[0]!r}; available: "
                          + ", ".join(available))
    cka_dir = out / "cka"
    _claim(cka_dir, args.force)
    cka_dir.mkdir(parents=True)
    mats = task_pair_cka(net, ds, layers, cfg.cka_steps, seed=seed)
    names = [t.name for t in ds.tasks]
    text = []
    for layer, mat in mats.items():
        lines = ["," + ",".join(names)] + [names[i] + "," + ",".join(repr(float(v)) for v in row)
                                         for i, row in enumerate(mat)]
        (cka_dir / f"{layer}.csv").write_text("\n".join(lines) + "\n")
        text.append(f"[{layer}]\n{heatmap_text(mat, names)}\n")
    (cka_dir / "heatmaps.txt").write_text("\n".join(text))
    print("\n".join(text), end="")
    return 0


def report_rows(summaries: list[dict]) -> list[dict]:
    baselines = [s for s in summaries if s.get("baseline")]
    if len(baselines) != 1:
        raise RunError(f"report needs exactly one baseline run, found {len(baselines)}")
    base = MetricRecord.from_json(baselines[0]["record"])
    rows = []
    for s in summaries:
        row = {"name": s["name"], "baseline": int(bool(s.get("baseline"))),
               "learnable": s["learnable"]}
        for i, task in enumerate(s["record"]):
            for m in task:
                row[f"t{i}.{m['name']}"] = m["value"]
        if "headline" in s.get("metrics", {}):
            h = s["metrics"]["headline"]
            row["headline"] = _fmt(h["mean"], h["std"])
        row["delta_p"] = round(delta_p(MetricRecord.from_json(s["record"]), base), 6)
        rows.append(row)
    return rows


def cmd_report(cfg: Optional[ExperimentConfig], args) -> int:
    summaries = []
    for d in args.runs:
        p = Path(d) / "summary.json"
        if not p.exists():
            raise RunError(f"{d}: no summary.json (is the run complete?)")
        summaries.append(json.loads(p.read_text()))
    rows = report_rows(summaries)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    table = [keys] + [[_cell(k, r.get(k, "")) for k in keys] for r in rows]
    csv_text = "\n".join(",".join(row) for row in table) + "\n"
    text = _aligned(table)
    out = Path(args.out) if args.out else (Path(cfg.output_dir) if cfg and cfg.output_dir else None)
    if out is not None:
        _write(out / "report.csv", csv_text, args.force)
        _write(out / "report.txt", text, args.force)
    print(text, end="")
    return 0


def _cell(key: str, v) -> str:
    if key == "delta_p":
        return f"{v:+.2f}"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
    "sweep-gamma": cmd_sweep_gamma, "search-primitives": cmd_search_primitives,
    "cka": cmd_cka, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etrnlp", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "report")
        p.add_argument("--out")
        p.add_argument("--seed", type=int, help="run this single seed instead of the config's")
        p.add_argument("--force", action="store_true")
        p.add_argument("--threads", type=int)
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from existing per-seed checkpoints")
            p.add_argument("--stop-after", type=int, help="stop after this many epochs")
        if name == "eval":
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "cka":
            p.add_argument("--checkpoint")
        if name == "report":
            p.add_argument("runs", nargs="+", help="run directories holding summary.json")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config) if args.config else None
        if cfg is not None and args.seed is not None:
            cfg.seeds = [args.seed]
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads: must be positive")
        limits = contextlib.nullcontext()
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            limits = threadpool_limits(args.threads)
        with limits:
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, ArchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RunError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
