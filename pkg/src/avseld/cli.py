"""Command line entry point: ``avseld <subcommand> [--section.key value ...]``.

Exit status is 0 on success, 1 for invalid input or configuration, 2 when a
run fails part way (non-finite loss, I/O trouble).
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics, train
from .backbone import SeldBackbone, load_checkpoint, student_from_teacher
from .config import ConfigError, RunConfig
from .distill import FusionModule, SppConfig, freeze
from .io import read_events_csv, read_labels_csv, write_events_csv
from .objectives import targets_from_labels
from .synth import LABEL_HOP, N_CLASSES, SceneSpec, write_dataset

log = logging.getLogger("avseld")


def _split_overrides(extra: list[str]) -> dict:
    """``--a.b 1 --kd both`` -> ``{"a.b": "1", "kd": "both"}``."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"{tok} needs a value")
        out[key] = value
    return out


def _load_config(args, extra) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), _split_overrides(extra))


def _stamp(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.hash} seed={cfg['run.seed']}\n"


def _prepare(cfg: RunConfig) -> Path:
    if cfg["run.verify"]:
        train.set_verification_mode()
    out = Path(cfg["run.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.ini")
    return out


def _dataset(cfg: RunConfig, key: str = "run.dataset") -> Path:
    path = cfg[key] or cfg["run.dataset"]
    if not path or not Path(path).is_dir():
        raise ConfigError(f"{key} must name an existing dataset directory (got {path!r})")
    return Path(path)


def _cache(cfg: RunConfig, dataset: Path) -> Path:
    return Path(cfg["run.cache_dir"]) if cfg["run.cache_dir"] else dataset / "cache"


# --- subcommands ------------------------------------------------------------

def cmd_synth(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    spec = SceneSpec(n_events=args.n_events, clip_seconds=args.clip_seconds,
                     snr_db=None if args.snr_db.lower() == "none" else float(args.snr_db),
                     seed=args.seed, normalization=args.normalization)
    names = write_dataset(args.out, args.n_clips, spec, prefix=args.prefix)
    print(f"wrote {len(names)} clips to {args.out}")
    return 0


def cmd_extract(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    cache = Path(args.cache_dir) if args.cache_dir else Path(args.dataset) / "cache"
    written = train.extract_dataset(args.dataset, cache, args.clip_seconds)
    print(f"wrote {len(written)} cache files to {cache}")
    return 0


def cmd_train_teacher(args, extra) -> int:
    cfg = _load_config(args, extra)
    data = _dataset(cfg)
    out = _prepare(cfg)
    clips = train.load_clips(data, _cache(cfg, data), cfg["run.task_mode"], "audio", cfg["run.max_clips"])
    torch.manual_seed(cfg["run.seed"])
    resume = None
    if args.resume:
        model, resume = load_checkpoint(args.resume)
        resume = {**resume["extra"], "optimizer": resume["optimizer"]}
    else:
        model = SeldBackbone(cfg.backbone(train.AUDIO_CHANNELS))
    model = model.to(torch.get_default_dtype())
    result = train.fit(model, clips, cfg, resume=resume, log_path=out / "train_log.csv")
    train.save_run(out / "teacher.pt", result, cfg, role="teacher")
    print(f"teacher checkpoint: {out / 'teacher.pt'}")
    return 0


def build_student(teacher: SeldBackbone, cfg: RunConfig) -> SeldBackbone:
    init = cfg["student.init"]
    kd_on = cfg["kd.rkd.enabled"] or cfg["kd.fkd.enabled"]
    if init == "teacher" or (init == "auto" and kd_on):
        return student_from_teacher(teacher, train.AV_CHANNELS)
    torch.manual_seed(cfg["run.seed"])
    blob = teacher.cfg.to_dict()
    blob["in_channels"] = train.AV_CHANNELS
    return SeldBackbone(type(teacher.cfg)(**blob)).to(next(teacher.parameters()).dtype)


def cmd_train_student(args, extra) -> int:
    cfg = _load_config(args, extra)
    teacher_path = Path(args.teacher)
    if not teacher_path.is_file():
        raise ConfigError(f"teacher checkpoint not found: {teacher_path}")
    teacher, blob = load_checkpoint(teacher_path)
    t_mode = blob["extra"].get("task_mode")
    if teacher.cfg.in_channels != train.AUDIO_CHANNELS:
        raise ConfigError(f"{teacher_path}: teacher expects {teacher.cfg.in_channels} channels, not audio-only input")
    if t_mode != cfg["run.task_mode"]:
        raise ConfigError(f"{teacher_path}: teacher trained for {t_mode}, run asks for {cfg['run.task_mode']}")
    data = _dataset(cfg)
    out = _prepare(cfg)
    teacher = freeze(teacher.to(torch.get_default_dtype()))
    clips = train.load_clips(data, _cache(cfg, data), cfg["run.task_mode"], "av", cfg["run.max_clips"])
    kd = train.KdSettings(cfg["kd.rkd.enabled"], cfg["kd.fkd.enabled"], cfg.rkd_weights(), SppConfig())
    resume = None
    if args.resume:
        student, rblob = load_checkpoint(args.resume)
        resume = {**rblob["extra"], "optimizer": rblob["optimizer"]}
    else:
        student = build_student(teacher, cfg)
    student = student.to(torch.get_default_dtype())
    fusion = None
    if kd.fkd:
        torch.manual_seed(cfg["run.seed"])
        fusion = FusionModule.for_models(student, teacher, cfg["kd.fkd.mid_channels"] or None)
        fusion = fusion.to(torch.get_default_dtype())
    before = train.param_hash(teacher)
    result = train.fit(student, clips, cfg, teacher=teacher, fusion=fusion, kd=kd, resume=resume,
                       log_path=out / "train_log.csv")
    after = train.param_hash(teacher)
    if before != after:
        raise RuntimeError("teacher parameters changed during student training")
    train.save_run(out / "student.pt", result, cfg, role="student", teacher_hash=before,
                   teacher_path=str(teacher_path))
    print(f"student checkpoint: {out / 'student.pt'}")
    return 0


def _write_reports(out: Path, cfg: RunConfig, report, calib=None, mse=None) -> None:
    stamp = _stamp(cfg)
    (out / "report.txt").write_text(stamp + report.to_text(), encoding="utf-8")
    (out / "report.flat").write_text(stamp + report.to_flat(), encoding="utf-8")
    if calib is not None:
        (out / "calibration.txt").write_text(stamp + calib.to_text(), encoding="utf-8")
    if mse is not None:
        lines = "".join(f"{name}\t{v:.8f}\n" for name, v in mse)
        (out / "mse_distribution.txt").write_text(stamp + "clip\tmse\n" + lines, encoding="utf-8")


def _reference_grids(dataset: Path, names, n_frames: int, task_mode: str):
    grids = []
    for name in names:
        path = dataset / "labels" / f"{name}.csv"
        if not path.exists():
            raise ConfigError(f"missing reference labels {path}")
        grids.append(metrics.grid_from_targets(
            targets_from_labels(read_labels_csv(path), n_frames, N_CLASSES, task_mode)))
    return grids


def _concat(grids) -> metrics.EventGrid:
    dist = None if grids[0].distance is None else np.concatenate([g.distance for g in grids])
    return metrics.EventGrid(np.concatenate([g.activity for g in grids]),
                             np.concatenate([g.doa for g in grids]), dist)


def _score(pred, ref, task_mode, average):
    if task_mode == "doa_distance_2024":
        return metrics.evaluate_2024(pred, ref, average=average)
    return metrics.evaluate_2023(pred, ref, average=average)


def cmd_evaluate(args, extra) -> int:
    cfg = _load_config(args, extra)
    task_mode = cfg["run.task_mode"]
    out = Path(args.out or cfg["run.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    average = "macro" if args.macro else "micro"
    data = _dataset(cfg, "run.eval_dataset")
    if args.predictions:
        # file mode: score prediction CSVs against the dataset's label files
        pred_dir = Path(args.predictions)
        files = sorted(pred_dir.glob("*.csv"))
        if not files:
            raise ConfigError(f"no prediction CSVs in {pred_dir}")
        n_frames = int(round(args.clip_seconds / LABEL_HOP))
        names = [f.stem for f in files]
        preds = [metrics.grid_from_events(read_events_csv(f), n_frames, N_CLASSES) for f in files]
        if task_mode == "doa_distance_2024" and any(g.distance is None for g in preds):
            raise ConfigError("doa_distance_2024 needs a distance_m column in every prediction file")
        refs = _reference_grids(data, names, n_frames, task_mode)
        pred, ref = _concat(preds), _concat(refs)
        if task_mode == "doa_2023":
            pred.distance = ref.distance = None
        _write_reports(out, cfg, _score(pred, ref, task_mode, average))
        print((out / "report.txt").read_text(encoding="utf-8"), end="")
        return 0
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint or --predictions")
    if cfg["run.verify"]:
        train.set_verification_mode()
    model, blob = load_checkpoint(args.checkpoint)
    ck_mode = blob["extra"].get("task_mode")
    if ck_mode != task_mode:
        raise ConfigError(f"{args.checkpoint}: checkpoint task_mode {ck_mode} does not match {task_mode}")
    modality = "av" if model.cfg.in_channels == train.AV_CHANNELS else "audio"
    clips = train.load_clips(data, _cache(cfg, data), task_mode, modality, cfg["run.max_clips"])
    ev = train.evaluate_model(model, clips, average)
    _write_reports(out, cfg, ev.report, ev.calibration, list(zip(clips.names, ev.mse)))
    pred_dir = out / "predictions"
    if pred_dir.exists():
        shutil.rmtree(pred_dir)
    pred_dir.mkdir()
    (pred_dir / "manifest.txt").write_text(_stamp(cfg) + f"checkpoint={args.checkpoint}\n", encoding="utf-8")
    with_dist = task_mode == "doa_distance_2024"
    for name, p, y in zip(clips.names, ev.p, ev.y):
        rows = metrics.events_from_output(p, y, task_mode)
        write_events_csv(pred_dir / f"{name.replace('#', '_seg')}.csv", rows, with_dist, True)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_report_calibration(args, extra) -> int:
    cfg = _load_config(args, extra)
    data = _dataset(cfg, "run.eval_dataset")
    files = sorted(Path(args.predictions).glob("*.csv"))
    if not files:
        raise ConfigError(f"no prediction CSVs in {args.predictions}")
    n_frames = int(round(args.clip_seconds / LABEL_HOP))
    conf, ref = [], []
    for f in files:
        grid = np.zeros((n_frames, N_CLASSES))
        for r in read_events_csv(f):
            if r.confidence is None:
                raise ConfigError(f"{f}: calibration needs a confidence column")
            grid[r.frame, r.cls] = r.confidence
        conf.append(grid)
        labels = data / "labels" / f"{f.stem}.csv"
        ref.append(targets_from_labels(read_labels_csv(labels), n_frames, N_CLASSES).activity)
    report = metrics.calibration_bins(np.concatenate(conf), np.concatenate(ref), args.bins)
    text = _stamp(cfg) + report.to_text()
    if args.out:
        out = Path(args.out)
        if out.is_dir() or not out.suffix:  # a directory gets calibration.txt, like evaluate
            out = out / "calibration.txt"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avseld", allow_abbrev=False, description="Audio-visual SELD with cross-modal distillation and feature mixing.",
        epilog="Any config key can be overridden with --section.key value (for example --train.epochs 5).")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)
    sub_kw = {"allow_abbrev": False, "parents": [common]}

    p = sub.add_parser("synth", **sub_kw, help="write a synthetic FOA dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, default=8)
    p.add_argument("--n-events", type=int, default=3)
    p.add_argument("--clip-seconds", type=float, default=10.0)
    p.add_argument("--snr-db", default="20")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalization", choices=("unit", "fuma"), default="unit")
    p.add_argument("--prefix", default="clip")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", **sub_kw, help="cache acoustic and visual features")
    p.add_argument("--dataset", required=True)
    p.add_argument("--cache-dir")
    p.add_argument("--clip-seconds", type=float, default=10.0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-teacher", **sub_kw, help="train the audio-only teacher")
    p.add_argument("--config")
    p.add_argument("--resume", help="continue from a teacher checkpoint")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", **sub_kw, help="train the audio-visual student against a frozen teacher")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--resume", help="continue from a student checkpoint")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("evaluate", **sub_kw, help="score a checkpoint or a directory of prediction CSVs")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--out")
    p.add_argument("--macro", action="store_true", help="class-wise macro averaging")
    p.add_argument("--clip-seconds", type=float, default=10.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report-calibration", **sub_kw, help="reliability bins from prediction CSVs with confidence")
    p.add_argument("--config")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", help="output file, or a directory to hold calibration.txt")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--clip-seconds", type=float, default=10.0)
    p.set_defaults(func=cmd_report_calibration)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except (ValueError, FileNotFoundError) as exc:  # ConfigError is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, RuntimeError, OSError) as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
