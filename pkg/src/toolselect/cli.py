"""Command-line entry point: simulate / train / eval / route.

Configuration is a flat key=value text file covering the world, selector,
trainer, and objective knobs; unknown keys are rejected. Every run is
reproducible from (config, seed).
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .anp_selector import SelectorConfig
from .baselines import (
    GlobalBestRouter,
    KNNRouter,
    MLPIndexRouter,
    OracleRouter,
    RandomRouter,
    ToolSelectRouter,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import export_dataset, export_tools
from .errors import ConfigError, ToolSelectError
from .evalharness import compare, machine_records, render_report
from .objective import ObjectiveConfig
from .simworld import WorldConfig, generate_world, sample_panel, world_digest
from .trainer import TrainConfig, build_model, default_selector_config, fit

from . import diffcore as dc

_WORLD_FIELDS = {f.name: f for f in dataclasses.fields(WorldConfig)}
_SELECTOR_FIELDS = {f.name: f for f in dataclasses.fields(SelectorConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_OBJECTIVE_FIELDS = {f.name: f for f in dataclasses.fields(ObjectiveConfig)}


def _coerce(key, value, typ):
    value = value.strip()
    if typ is bool or typ == "bool":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {value!r}")
    try:
        if typ is int or typ == "int":
            return int(value)
        if typ is float or typ == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc
    if key == "task_weights":
        if value.lower() == "none":
            return None
        return np.asarray([float(v) for v in value.split(",")], dtype=np.float64)
    if key == "task_label_counts":
        return tuple(int(v) for v in value.split(","))
    raise ConfigError(f"config key {key!r}: unsupported value type")


@dataclasses.dataclass
class RunConfig:
    """Parsed flat config; selector overrides are applied on top of the
    world-derived selector defaults."""
    world: WorldConfig
    train: TrainConfig
    objective: ObjectiveConfig
    selector_overrides: dict

    def selector_config(self, world):
        base = default_selector_config(world, ref_size=self.train.ref_size)
        if not self.selector_overrides:
            return base
        merged = dataclasses.asdict(base)
        merged.update(self.selector_overrides)
        merged["task_label_counts"] = tuple(merged["task_label_counts"])
        return SelectorConfig(**merged)


def parse_config(path=None):
    """Order-insensitive key=value parser; unknown keys rejected."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                raw[key.strip()] = value.strip()
    world_kw, train_kw, obj_kw, sel_kw = {}, {}, {}, {}
    for key, value in raw.items():
        known = False
        for fields, sink in ((_WORLD_FIELDS, world_kw), (_TRAIN_FIELDS, train_kw),
                             (_OBJECTIVE_FIELDS, obj_kw), (_SELECTOR_FIELDS, sel_kw)):
            f = fields.get(key)
            if f is not None:
                sink[key] = _coerce(key, value, f.type)
                known = True
        if not known:
            raise ConfigError(f"unknown config key {key!r}")
    return RunConfig(world=WorldConfig(**world_kw), train=TrainConfig(**train_kw),
                     objective=ObjectiveConfig(**obj_kw), selector_overrides=sel_kw)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser():
    parser = _Parser(prog="toolselect", description="Query-conditioned tool router")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (("simulate", "generate a world and export its splits"),
                      ("train", "fit the selector; write checkpoint and epoch log"),
                      ("eval", "evaluate routers on the test split; write a report"),
                      ("route", "route one query record with a trained checkpoint")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".", help="output directory")
        if name == "route":
            p.add_argument("--input", default="-",
                           help="query record file (JSON line); '-' reads stdin")
            p.add_argument("--panel-size", type=int, default=6)
    return parser


def _load_world(cfg, seed):
    return generate_world(cfg.world, seed)


def cmd_simulate(args, cfg):
    world = _load_world(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    for split in ("train", "val", "test"):
        export_dataset(world, split, os.path.join(args.out, f"{split}.jsonl"))
    export_tools(world, os.path.join(args.out, "tools.jsonl"))
    print(f"world_digest={world_digest(world)}")
    print(f"wrote train/val/test/tools under {args.out}")
    return 0


def cmd_train(args, cfg):
    world = _load_world(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    train_cfg = dataclasses.replace(cfg.train, seed=args.seed)
    log_path = os.path.join(args.out, "epochs.log")
    lines = []
    result = fit(train_cfg, world, objective_cfg=cfg.objective,
                 selector_cfg=cfg.selector_config(world),
                 log_fn=lambda s: (lines.append(s), print(s)))
    with open(log_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(result.params, ckpt_path)
    print(f"checkpoint={ckpt_path}")
    return 0


def _toolselect_router(world, cfg, ckpt_path):
    tensors = load_checkpoint(ckpt_path)
    params = {k: dc.Tensor(v, requires_grad=False) for k, v in tensors.items()}
    model = build_model(world, params, cfg.selector_config(world))
    return ToolSelectRouter(model)


def cmd_eval(args, cfg):
    world = _load_world(cfg, args.seed)
    routers = [RandomRouter(), OracleRouter(world),
               GlobalBestRouter.fit(world), KNNRouter.fit(world),
               MLPIndexRouter.fit(world, seed=args.seed)]
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    if os.path.exists(ckpt_path):
        routers.append(_toolselect_router(world, cfg, ckpt_path))
    reports = compare(routers, world, "test", cfg.train.panel_size, args.seed)
    os.makedirs(args.out, exist_ok=True)
    table = render_report(reports)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(table)
    with open(os.path.join(args.out, "records.txt"), "w") as fh:
        fh.write("\n".join(machine_records(reports)) + "\n")
    sys.stdout.write(table)
    return 0


def cmd_route(args, cfg):
    if args.input == "-":
        line = sys.stdin.readline()
    else:
        with open(args.input) as fh:
            line = fh.readline()
    record = json.loads(line)
    world = _load_world(cfg, args.seed)
    lq = import_dataset_record(record)
    router = _toolselect_router(world, cfg, os.path.join(args.out, "checkpoint.bin"))
    rng = np.random.default_rng([args.seed, 50331653, lq.query.uid])
    panel = sample_panel(world.populations[lq.query.task], lq.query,
                         args.panel_size, rng)
    dist = router.model.select(lq.query, panel)
    tool = panel.tools[dist.selected]
    probs = " ".join(f"{p:.6f}" for p in dist.probs)
    print(f"tool={tool.tool_id} slot={dist.selected} probs=[{probs}]")
    return 0


def import_dataset_record(record):
    """One dataset line -> LabeledQuery (route subcommand input)."""
    from .datasets import _gt_from_payload
    from .domain import LabeledQuery, Query, TaskFamily
    family = TaskFamily(record["family"])
    query = Query(uid=int(record["uid"]), task=int(record["task"]),
                  x=np.asarray(record["x"], dtype=np.float64),
                  q=np.asarray(record["q"], dtype=np.float64))
    return LabeledQuery(query, _gt_from_payload(family, record["gt"]))


_COMMANDS = {"simulate": cmd_simulate, "train": cmd_train,
             "eval": cmd_eval, "route": cmd_route}


def run(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = parse_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except (ToolSelectError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
