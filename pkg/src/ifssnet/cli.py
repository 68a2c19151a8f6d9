"""``ifssnet`` command line.

Dataset directories hold one sub-directory per patient with ``volume.mvol``
and ``mask_<s>.mvol`` for each structure ``s``. A sparse-annotation
directory holds ``mask.mvol`` and ``schedule.txt`` (annotated indices on one
line). Failures print a single ``error: <code>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from . import config as cfgmod
from .baselines import fill_between_slices, zero_order_propagate
from .metrics import evaluate, write_report, write_series
from .net import NetConfig, load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, generate_phantom
from .propagation import propagate
from .training import TrainConfig, TrainingDivergedError, train, write_log
from .volume import (
    MaskVolume,
    MVOLError,
    Volume,
    decremental_schedule,
    fixed_interval_schedule,
    format_schedules,
    parse_schedules,
    read_mvol,
    write_mvol,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CLIError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message.replace("\n", " "), EXIT_USAGE)


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError("missing-file", f"no such file or directory: {p}", EXIT_USAGE)
    return p


def _read(path, kind):
    obj = read_mvol(_existing(path))
    if not isinstance(obj, kind):
        raise CLIError("bad-input", f"{path} holds a {type(obj).__name__}, expected {kind.__name__}")
    return obj


# ---------------------------------------------------------------- gen-phantom


def cmd_gen_phantom(args) -> int:
    values = cfgmod.read_config(_existing(args.spec)) if args.spec else {}
    count = cfgmod.take(values, "count", 1)
    kwargs, rest = cfgmod.split_for(PhantomSpec, values)
    cfgmod.reject_unknown(rest)
    base = PhantomSpec(**kwargs)
    out = Path(args.out)
    for i in range(count):
        spec = base.with_seed(base.seed + i)
        volume, masks = generate_phantom(spec)
        pdir = out / f"p{i:03d}"
        pdir.mkdir(parents=True, exist_ok=True)
        write_mvol(volume, pdir / "volume.mvol")
        for s, m in enumerate(masks):
            write_mvol(m, pdir / f"mask_{s}.mvol")
    print(f"wrote {count} phantom(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- train


def load_dataset(directory, structure: int = 0):
    root = _existing(directory)
    patients = sorted(p for p in root.iterdir() if p.is_dir() and (p / "volume.mvol").exists())
    if not patients:
        raise CLIError("bad-input", f"{root} contains no patient directories with volume.mvol")
    data = []
    for p in patients:
        data.append((_read(p / "volume.mvol", Volume), _read(p / f"mask_{structure}.mvol", MaskVolume)))
    return [p.name for p in patients], data


def _train_one(job):
    data_dir, structure, net_kwargs, train_kwargs, sched_opts, out = job
    names, data = load_dataset(data_dir, structure)
    net_cfg = NetConfig(**net_kwargs)
    train_cfg = TrainConfig(**train_kwargs)
    schedules = None
    if train_cfg.mode == "few_shot":
        if sched_opts["schedule_file"]:
            text = Path(_existing(sched_opts["schedule_file"])).read_text()
            schedules = parse_schedules(text, [v.depth for v, _ in data])
        else:
            schedules = decremental_schedule(
                [v.depth for v, _ in data],
                budget_frac=sched_opts["budget_frac"],
                floor_frac=sched_opts["floor_frac"],
                init_frac=sched_opts["init_frac"],
                w=net_cfg.w,
            )
    net, log = train(data, schedules, net_cfg, train_cfg)
    save_checkpoint(net, out, {"structure": structure, "patients": names, "mode": train_cfg.mode})
    write_log(log, str(out) + ".log.csv")
    return str(out)


def cmd_train(args) -> int:
    values = cfgmod.read_config(_existing(args.config)) if args.config else {}
    net_kwargs, rest = cfgmod.split_for(NetConfig, values)
    train_kwargs, rest = cfgmod.split_for(TrainConfig, rest)
    structures = cfgmod.take(rest, "structures", (0,))
    sched_opts = {
        "budget_frac": cfgmod.take(rest, "budget_frac", 0.035),
        "floor_frac": cfgmod.take(rest, "floor_frac", 0.03),
        "init_frac": cfgmod.take(rest, "init_frac", 0.164),
        "schedule_file": cfgmod.take(rest, "schedule_file", None),
    }
    cfgmod.reject_unknown(rest)
    train_kwargs["mode"] = args.mode
    # validate before any job starts
    NetConfig(**net_kwargs)
    TrainConfig(**train_kwargs)
    out = Path(args.out)
    jobs = []
    for s in structures:
        path = out if len(structures) == 1 else out.with_name(f"{out.stem}_s{s}{out.suffix}")
        jobs.append((args.data, s, net_kwargs, train_kwargs, sched_opts, path))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            written = list(pool.map(_train_one, jobs))
    else:
        written = [_train_one(j) for j in jobs]
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ------------------------------------------------------------------ propagate


def cmd_propagate(args) -> int:
    net = load_checkpoint(_existing(args.ckpt))
    volume = _read(args.volume, Volume)
    seeds = _read(args.seeds, MaskVolume)
    mask, _, meta = propagate(net, volume, seeds, fuse=args.fuse, return_details=True)
    write_mvol(mask, args.out)
    Path(str(args.out) + ".json").write_text(json.dumps(meta) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    pred = _read(args.pred, MaskVolume)
    gt = _read(args.gt, MaskVolume)
    if pred.shape != gt.shape:
        raise CLIError("shape-mismatch", f"prediction {pred.shape} vs ground truth {gt.shape}")
    report, series = evaluate(pred, gt, gt.spacing, structure=args.structure, per_slice=True)
    write_report([report], args.report)
    if args.per_slice:
        write_series(series, args.per_slice, args.structure)
    print(f"dice {report.dice:.4f} vol_err_pct {report.vol_err_pct:.3f}")
    return EXIT_OK


# ------------------------------------------------------------------- baseline


def cmd_baseline(args) -> int:
    sdir = _existing(args.sparse)
    mask = _read(sdir / "mask.mvol", MaskVolume)
    idx = [int(tok) for tok in (_existing(sdir / "schedule.txt")).read_text().split()]
    method = zero_order_propagate if args.method == "zero" else fill_between_slices
    write_mvol(method(mask, idx), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------- schedule


def cmd_schedule(args) -> int:
    if args.mode == "interval":
        if len(args.T) != 1:
            raise CLIError("usage", "interval mode takes a single --T", EXIT_USAGE)
        schedules = [fixed_interval_schedule(args.T[0], args.period, args.k)]
    else:
        T_list = args.T * args.n if len(args.T) == 1 else args.T
        schedules = decremental_schedule(
            T_list, args.budget_frac, args.floor_frac, args.init_frac, w=args.w, group=args.k
        )
    sys.stdout.write(format_schedules(schedules))
    return EXIT_OK


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ifssnet", description="Few-shot volumetric mask propagation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-phantom", help="write synthetic phantoms")
    p.add_argument("--spec", help="key = value PhantomSpec file (plus 'count')")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("train", help="train a checkpoint")
    p.add_argument("--mode", choices=("full", "few_shot"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("propagate", help="segment a volume from seed slices")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--seeds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fuse", choices=("last", "mean"), default="last")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--per-slice", dest="per_slice")
    p.add_argument("--structure", default="0")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="non-learning propagation")
    p.add_argument("--method", choices=("zero", "fbs"), required=True)
    p.add_argument("--sparse", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("schedule", help="print annotation schedules")
    p.add_argument("--mode", choices=("interval", "decremental"), required=True)
    p.add_argument("--T", type=int, nargs="+", required=True)
    p.add_argument("--period", type=int, default=100)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--n", type=int, default=1, help="patients when a single --T is given")
    p.add_argument("--w", type=int, default=3)
    p.add_argument("--budget-frac", dest="budget_frac", type=float, default=0.035)
    p.add_argument("--floor-frac", dest="floor_frac", type=float, default=0.03)
    p.add_argument("--init-frac", dest="init_frac", type=float, default=0.164)
    p.set_defaults(func=cmd_schedule)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except CLIError as exc:
        status, code, msg = exc.status, exc.code, str(exc)
    except cfgmod.ConfigError as exc:
        status, code, msg = EXIT_USAGE, "config", str(exc)
    except MVOLError as exc:
        status, code, msg = EXIT_FAIL, "mvol", str(exc)
    except FileNotFoundError as exc:
        status, code, msg = EXIT_USAGE, "missing-file", str(exc)
    except TrainingDivergedError as exc:
        status, code, msg = EXIT_FAIL, "diverged", str(exc)
    except (ValueError, OSError) as exc:
        status, code, msg = EXIT_FAIL, "invalid", str(exc)
    print(f"error: {code}: {' '.join(msg.split())}", file=sys.stderr)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
