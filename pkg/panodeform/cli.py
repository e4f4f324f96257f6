# -*- coding: utf-8 -*-
"""Línea de comandos ``panodeform``.

Cada comando resuelve un :class:`~panodeform.schemas.RunConfig` (archivo
JSON + ``--set`` + ``--seed``), escribe ``resolved_config.json`` junto a
sus salidas y termina con el ``exit_code`` del error que lo detuvo.

Layout de un run (``--run-dir``)::

    data/               manifest.json + splits
    source/             checkpoint de la fuente + train.jsonl
    bank/               banco inicial de prototipos
    adapt-<modo>/       checkpoint adaptado, banco final, adapt.jsonl
    eval-<modo>/        eval.json, eval.txt, eval_polar.csv
    ladder.json         mIoU por modo (comando ``pipeline``)

"""
import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional

from pydantic import ValidationError

from panodeform import S
from panodeform import logger
from panodeform.exceptions import ConfigError
from panodeform.exceptions import DatasetIOError
from panodeform.exceptions import OutputDirNotEmpty
from panodeform.exceptions import PanoDeformErrorMixin
from panodeform.exceptions import StageFailed
from panodeform.metrics import iou
from panodeform.metrics import render_table as render_report
from panodeform.metrics import report
from panodeform.metrics import write_report
from panodeform.mpa import PrototypeBank
from panodeform.mpa import init_bank
from panodeform.mpa import load_bank
from panodeform.mpa import save_bank
from panodeform.panogeo import build_datasets
from panodeform.panogeo import checksum
from panodeform.panogeo import load_manifest
from panodeform.panogeo import load_split
from panodeform.schemas import AdaptMode
from panodeform.schemas import EvalReport
from panodeform.schemas import RunConfig
from panodeform.trainer import adapt
from panodeform.trainer import evaluate
from panodeform.trainer import load_checkpoint
from panodeform.trainer import save_checkpoint
from panodeform.trainer import train_source
from panodeform.trans4pass import Trans4PASS
from panodeform.trans4pass import describe
from panodeform.utils import gradcheck
from panodeform.utils.overrides import apply_overrides
from panodeform.utils.rng import stream

RESOLVED = "resolved_config.json"

SWEEPS: Dict[str, List[Any]] = {
    "r": [None, 1, 2, 4, 8],
    "alpha": [0.0, 1e-4, 1e-3, 1e-2, 1e-1],
    "temperature": [5, 10, 20, 35, 50],
}
SWEEP_ALPHA_TEMPERATURE = 35


def _deep_update(base: Dict, extra: Dict) -> Dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def validate(raw: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig(**raw)
    except ValidationError as error:
        raise ConfigError(detail=str(error).replace("\n", " "))


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[List[str]] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """Defaults, luego el archivo, luego ``--set`` y por último ``--seed``."""
    raw = json.loads(RunConfig().json())
    if path is not None:
        try:
            _deep_update(raw, json.loads(Path(path).read_text()))
        except OSError as error:
            raise DatasetIOError(path=path, detail=error)
        except ValueError as error:
            raise ConfigError(detail="{}: {}".format(path, error))
    raw = apply_overrides(raw, overrides or [])
    if seed is not None:
        raw["seed"] = seed
    return validate(raw)


def prepare_output(directory: Path, force: bool) -> Path:
    """Crea ``directory``; si tiene contenido exige ``force``."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not force:
        raise OutputDirNotEmpty(path=directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as error:
        raise DatasetIOError(path=directory, detail=error)
    return directory


def write_resolved(cfg: RunConfig, directory: Path) -> Path:
    path = Path(directory) / RESOLVED
    try:
        path.write_text(cfg.json(indent=2, sort_keys=True) + "\n")
    except OSError as error:
        raise DatasetIOError(path=path, detail=error)
    return path


def _scenes(data_dir: Path, split: str):
    return load_split(data_dir, load_manifest(data_dir), split)


# Etapas ----------------------------------------------------------------------


def synth(cfg: RunConfig, out: Path, force: bool = False) -> Path:
    """Genera el dataset sintético y retorna el path del manifest."""
    out = prepare_output(out, force)
    manifest = build_datasets(
        cfg.scene,
        cfg.data.n_source,
        cfg.data.n_target,
        cfg.data.n_test,
        cfg.seed,
        out,
        n_source_test=cfg.data.n_source_test,
    )
    write_resolved(cfg, out)
    digest = checksum(out, manifest)
    print(
        "dataset {}: K={} source={} target={} test={} source_test={}".format(
            out,
            manifest.classes,
            len(manifest.source),
            len(manifest.target),
            len(manifest.test),
            len(manifest.source_test),
        )
    )
    print("sha256 {}".format(digest))
    return out / "manifest.json"


def train_source_stage(
    cfg: RunConfig, data_dir: Path, out: Path, force: bool = False
) -> Path:
    out = prepare_output(out, force)
    write_resolved(cfg, out)
    scenes = _scenes(data_dir, "source")
    model = Trans4PASS(cfg.model, stream(cfg.seed, "init"))
    train_source(
        model, scenes, cfg.trainer, seed=cfg.seed, log_path=out / "train.jsonl"
    )
    return save_checkpoint(model, out)


def init_bank_stage(  # pylint: disable=too-many-arguments
    cfg: RunConfig,
    checkpoint: Path,
    data_dir: Path,
    out: Path,
    force: bool = False,
) -> PrototypeBank:
    out = prepare_output(out, force)
    write_resolved(cfg, out)
    model = load_checkpoint(checkpoint)
    bank = init_bank(
        model,
        _scenes(data_dir, "source"),
        _scenes(data_dir, "target"),
        momentum=cfg.adapt.momentum,
        scales=cfg.adapt.scales,
        threshold=cfg.adapt.pseudo_threshold,
    )
    save_bank(bank, out)
    return bank


def adapt_stage(  # pylint: disable=too-many-arguments
    cfg: RunConfig,
    mode: AdaptMode,
    checkpoint: Path,
    bank_dir: Optional[Path],
    data_dir: Path,
    out: Path,
    force: bool = False,
) -> Path:
    """Adapta desde ``checkpoint`` y guarda en ``out``."""
    mode = AdaptMode(mode)
    out = prepare_output(out, force)
    write_resolved(cfg, out)
    model = load_checkpoint(checkpoint)
    bank = None
    if mode.uses_bank and bank_dir is not None:
        bank = load_bank(bank_dir)
    adapt(
        model,
        bank,
        _scenes(data_dir, "source"),
        _scenes(data_dir, "target"),
        cfg.trainer,
        cfg.adapt,
        mode,
        seed=cfg.seed,
        log_path=out / "adapt.jsonl" if mode != AdaptMode.none else None,
    )
    if bank is not None:
        save_bank(bank, out)
    return save_checkpoint(model, out)


def eval_stage(  # pylint: disable=too-many-arguments
    cfg: RunConfig,
    checkpoint: Path,
    data_dir: Path,
    out: Path,
    force: bool = False,
    mode: str = AdaptMode.none.value,
) -> EvalReport:
    """mIoU en panoramas de test, desglose polar y gap contra pinhole."""
    out = prepare_output(out, force)
    write_resolved(cfg, out)
    model = load_checkpoint(checkpoint)
    manifest = load_manifest(data_dir)
    cm, breakdown = evaluate(
        model,
        load_split(data_dir, manifest, "test"),
        n_sectors=cfg.eval.n_sectors,
    )
    source_miou = None
    if manifest.source_test:
        source_cm, _ = evaluate(
            model, load_split(data_dir, manifest, "source_test"), polar=False
        )
        source_miou = iou(source_cm).miou
    result = report(cm, breakdown, source_miou=source_miou, mode=mode)
    write_report(result, out)
    logger.info(
        "evaluación",
        mode=mode,
        miou=result.miou,
        source_miou=source_miou,
        gap=result.gap,
    )
    return result


def run_pipeline(
    cfg: RunConfig,
    run_dir: Path,
    force: bool = False,
    modes: Optional[List[AdaptMode]] = None,
) -> Dict[str, Any]:
    """synth -> train-source -> init-bank -> adapt(modo) -> eval por modo.

    Un error en cualquier etapa se relanza como :class:`StageFailed` con
    el nombre de la etapa.

    """
    run_dir = prepare_output(run_dir, force)
    write_resolved(cfg, run_dir)
    modes = [AdaptMode(m) for m in (modes or cfg.eval.modes)]
    data_dir = run_dir / "data"
    source_dir = run_dir / "source"
    bank_dir = run_dir / "bank"

    def stage(name: str, fn: Callable, *args, **kwargs):
        logger.info("etapa", stage=name)
        try:
            return fn(*args, **kwargs)
        except Exception as error:  # pylint: disable=broad-except
            raise StageFailed(stage=name, cause=error) from error

    stage("synth", synth, cfg, data_dir, True)
    stage("train-source", train_source_stage, cfg, data_dir, source_dir, True)
    if any(mode.uses_bank for mode in modes):
        stage(
            "init-bank",
            init_bank_stage,
            cfg,
            source_dir,
            data_dir,
            bank_dir,
            True,
        )
    ladder: Dict[str, Any] = {"modes": {}, "pinhole": {}}
    for mode in modes:
        adapted = run_dir / ("adapt-" + mode.value)
        stage(
            "adapt:" + mode.value,
            adapt_stage,
            cfg,
            mode,
            source_dir,
            bank_dir if mode.uses_bank else None,
            data_dir,
            adapted,
            True,
        )
        result = stage(
            "eval:" + mode.value,
            eval_stage,
            cfg,
            adapted,
            data_dir,
            run_dir / ("eval-" + mode.value),
            True,
            mode.value,
        )
        ladder["modes"][mode.value] = result.miou
        ladder["pinhole"][mode.value] = result.source_miou
    path = run_dir / "ladder.json"
    path.write_text(json.dumps(ladder, indent=2, sort_keys=True) + "\n")
    return ladder


def _sweep_config(cfg: RunConfig, study: str, value: Any) -> RunConfig:
    raw = json.loads(cfg.json())
    if study == "r":
        raw["model"]["r"] = value
    elif study == "alpha":
        raw["adapt"]["alpha"] = value
        raw["adapt"]["temperature"] = SWEEP_ALPHA_TEMPERATURE
    else:
        raw["adapt"]["temperature"] = value
    return validate(raw)


def sweep(
    cfg: RunConfig,
    run_dir: Path,
    force: bool = False,
    studies: Optional[List[str]] = None,
    mode: AdaptMode = AdaptMode.mpa_ssl,
) -> List[Dict[str, Any]]:
    """Estudios de ``r``, ``alpha`` y ``T`` desde un mismo checkpoint fuente.

    ``r`` no cambia formas de parámetros: el checkpoint se carga en un
    modelo construido con el ``r`` del estudio y el banco se recalcula
    con ese modelo.

    """
    run_dir = prepare_output(run_dir, force)
    write_resolved(cfg, run_dir)
    data_dir = run_dir / "data"
    source_dir = run_dir / "source"
    synth(cfg, data_dir, True)
    train_source_stage(cfg, data_dir, source_dir, True)
    source = load_checkpoint(source_dir)
    rows = []
    for study in studies or list(SWEEPS):
        for value in SWEEPS[study]:
            variant = _sweep_config(cfg, study, value)
            tag = "{}={}".format(study, "none" if value is None else value)
            model = Trans4PASS(variant.model)
            model.load_state_dict(source.state_dict())
            bank = init_bank(
                model,
                _scenes(data_dir, "source"),
                _scenes(data_dir, "target"),
                momentum=variant.adapt.momentum,
                scales=variant.adapt.scales,
                threshold=variant.adapt.pseudo_threshold,
            )
            adapt(
                model,
                bank,
                _scenes(data_dir, "source"),
                _scenes(data_dir, "target"),
                variant.trainer,
                variant.adapt,
                mode,
                seed=variant.seed,
            )
            cm, _ = evaluate(model, _scenes(data_dir, "test"), polar=False)
            miou = iou(cm).miou
            rows.append({"study": study, "value": value, "miou": miou})
            logger.info("sweep", tag=tag, miou=miou)
    (run_dir / "sweep.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True) + "\n"
    )
    buffer = io.StringIO()
    writer = csv.DictWriter(
        buffer, ["study", "value", "miou"], lineterminator="\n"
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(
            dict(row, value="none" if row["value"] is None else row["value"])
        )
    (run_dir / "sweep.csv").write_text(buffer.getvalue())
    return rows


# Argumentos ------------------------------------------------------------------


def _run_dir(args) -> Path:
    return Path(args.run_dir)


def _data_dir(args) -> Path:
    return Path(args.data) if args.data else _run_dir(args) / "data"


def _cmd_synth(args, cfg: RunConfig) -> None:
    synth(cfg, Path(args.out) if args.out else _data_dir(args), args.force)


def _cmd_train_source(args, cfg: RunConfig) -> None:
    out = Path(args.out) if args.out else _run_dir(args) / "source"
    train_source_stage(cfg, _data_dir(args), out, args.force)
    print("checkpoint {}".format(out))


def _cmd_init_bank(args, cfg: RunConfig) -> None:
    checkpoint = Path(args.checkpoint or _run_dir(args) / "source")
    out = Path(args.out) if args.out else _run_dir(args) / "bank"
    bank = init_bank_stage(cfg, checkpoint, _data_dir(args), out, args.force)
    print("{} en {}".format(bank, out))


def _cmd_adapt(args, cfg: RunConfig) -> None:
    mode = AdaptMode(args.mode)
    checkpoint = Path(args.checkpoint or _run_dir(args) / "source")
    bank_dir = Path(args.bank) if args.bank else None
    if bank_dir is None and mode.uses_bank:
        default = _run_dir(args) / "bank"
        bank_dir = default if default.exists() else None
    out = _run_dir(args) / ("adapt-" + mode.value)
    if args.out:
        out = Path(args.out)
    adapt_stage(
        cfg, mode, checkpoint, bank_dir, _data_dir(args), out, args.force
    )
    print("checkpoint {}".format(out))


def _cmd_eval(args, cfg: RunConfig) -> None:
    mode = AdaptMode(args.mode) if args.mode else None
    default = "adapt-" + mode.value if mode is not None else "source"
    checkpoint = Path(args.checkpoint or _run_dir(args) / default)
    label = mode.value if mode is not None else AdaptMode.none.value
    out = Path(args.out) if args.out else _run_dir(args) / ("eval-" + label)
    result = eval_stage(
        cfg, checkpoint, _data_dir(args), out, args.force, label
    )
    sys.stdout.write(render_report(result))


def _cmd_gradcheck(args, cfg: RunConfig) -> None:
    results = gradcheck.run_checks(
        args.scope, seed=cfg.seed, trials=args.trials, names=args.only
    )
    sys.stdout.write(gradcheck.render_table(results))
    gradcheck.assert_passed(results)


def _cmd_describe(args, cfg: RunConfig) -> None:
    height = args.height or cfg.scene.panorama_height
    width = args.width or cfg.scene.panorama_width
    summary = describe(cfg.model, height, width)
    sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _cmd_pipeline(args, cfg: RunConfig) -> None:
    modes = [AdaptMode(m) for m in args.modes] if args.modes else None
    ladder = run_pipeline(cfg, _run_dir(args), args.force, modes)
    for mode, miou in ladder["modes"].items():
        print("{:<8} {:6.2f}".format(mode, miou))
    for mode, miou in ladder["pinhole"].items():
        if miou is not None:
            print("{:<8} {:6.2f} (pinhole)".format(mode, miou))


def _cmd_sweep(args, cfg: RunConfig) -> None:
    rows = sweep(cfg, _run_dir(args), args.force, args.studies)
    for row in rows:
        value = "none" if row["value"] is None else row["value"]
        print("{:<12} {:>8} {:6.2f}".format(row["study"], value, row["miou"]))


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="RunConfig en JSON")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="PATH=VALUE",
        help="override punteado, p.ej. trainer.lr0=1e-4 (repetible)",
    )
    common.add_argument("--seed", type=int, default=None)
    common.add_argument(
        "--run-dir", default=str(S.RUNS_DIR / "default"), help="directorio"
    )
    common.add_argument("--force", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panodeform",
        description="Segmentación panorámica con embeddings deformables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    modes = [m.value for m in AdaptMode]

    def command(name: str, handler, help_: str):
        cmd = sub.add_parser(name, parents=[common], help=help_)
        cmd.set_defaults(handler=handler)
        return cmd

    cmd = command("synth", _cmd_synth, "genera el dataset sintético")
    cmd.add_argument("--out")
    cmd.add_argument("--classes", type=int)
    cmd.add_argument("--data")

    cmd = command("train-source", _cmd_train_source, "entrena en pinhole")
    cmd.add_argument("--data")
    cmd.add_argument("--out")

    cmd = command("init-bank", _cmd_init_bank, "inicializa prototipos")
    cmd.add_argument("--data")
    cmd.add_argument("--checkpoint")
    cmd.add_argument("--out")

    cmd = command("adapt", _cmd_adapt, "adapta al dominio panorámico")
    cmd.add_argument("--mode", choices=modes, required=True)
    cmd.add_argument("--data")
    cmd.add_argument("--checkpoint")
    cmd.add_argument("--bank")
    cmd.add_argument("--out")

    cmd = command("eval", _cmd_eval, "evalúa en panoramas de test")
    cmd.add_argument("--mode", choices=modes)
    cmd.add_argument("--data")
    cmd.add_argument("--checkpoint")
    cmd.add_argument("--out")

    cmd = command("gradcheck", _cmd_gradcheck, "diferencias finitas")
    cmd.add_argument("--scope", choices=gradcheck.SCOPES, default="op")
    cmd.add_argument("--trials", type=int, default=gradcheck.TRIALS)
    cmd.add_argument("--only", nargs="+")

    cmd = command("describe", _cmd_describe, "formas y parámetros")
    cmd.add_argument("--height", type=int)
    cmd.add_argument("--width", type=int)

    cmd = command("pipeline", _cmd_pipeline, "escalera de ablación")
    cmd.add_argument("--modes", nargs="+", choices=modes)

    cmd = command("sweep", _cmd_sweep, "estudios de r, alpha y T")
    cmd.add_argument("--studies", nargs="+", choices=list(SWEEPS))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if getattr(args, "classes", None):
            overrides += [
                "scene.classes={}".format(args.classes),
                "model.classes={}".format(args.classes),
            ]
        cfg = load_config(args.config, overrides, args.seed)
        args.handler(args, cfg)
    except PanoDeformErrorMixin as error:
        logger.error(
            "comando fallido",
            command=args.command,
            error=str(error),
            exit_code=error.exit_code,
        )
        return error.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
