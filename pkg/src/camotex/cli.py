"""Command-line entry point: ``camotex <subcommand> [options]``.

Each run writes into its own directory (``--out`` or a timestamped folder
under the output root) together with ``resolved_config.yaml`` and ``seed``.
Failures print one ``camotex-error {json}`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time

import numpy as np

from . import config as cfgmod
from .config import ConfigError

log = logging.getLogger("camotex")

SUBCOMMANDS = {
    "prepare-uv": "relax the uv patches of a mesh and export distortion heatmaps",
    "render-dataset": "render the attack, test and detector-training datasets",
    "train-victim": "train the grid detector on a rendered dataset",
    "optimize": "optimize an adversarial texture against a trained detector",
    "evaluate": "score clean, random and adversarial textures on held-out scenes",
    "export": "write a texture as an 8-bit PNG plus its texel mask",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"camotex-error {json.dumps({'field': 'argv', 'message': message})}", file=sys.stderr)
        raise SystemExit(2)


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand
    d = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file", **d)
    common.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                        help="override a configuration value, e.g. attack.lr=0.01 (repeatable)",
                        **(d or {"default": []}))
    common.add_argument("--seed", type=int, help="global seed", **d)
    common.add_argument("--out", help="exact output directory (default: timestamped under the output root)", **d)
    common.add_argument("--output-root", help=f"parent of run directories (env {cfgmod.OUTPUT_ROOT_ENV})", **d)
    common.add_argument("--mesh", help="mesh file (OBJ)", **d)
    common.add_argument("--atlas", help="atlas file (JSON)", **d)
    common.add_argument("--texture", help="texture file (PNG or NPY)", **d)
    common.add_argument("--dataset", help="dataset directory", **d)
    common.add_argument("--weights", help="detector weight file", **d)
    common.add_argument("-v", "--verbose", action="store_true", **d)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="camotex", description="Adversarial camouflage texture toolkit.",
                     parents=[_common(False)])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}",
                                parser_class=_Parser)
    shared = _common(True)
    for name, text in SUBCOMMANDS.items():
        sub.add_parser(name, help=text, description=text, parents=[shared])
    return parser


def _resolve(args) -> dict:
    overrides = [cfgmod.parse_override(o) for o in args.overrides]
    paths = {k: getattr(args, k) for k in ("mesh", "atlas", "texture", "dataset", "weights")
             if getattr(args, k) is not None}
    if args.output_root is not None:
        paths["output_root"] = args.output_root
    if paths:
        overrides.append({"paths": paths})
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    return cfgmod.resolve(cfgmod.load_config(args.config), overrides)


def _require(cfg, field):
    value = cfg["paths"][field]
    if value is None:
        raise ConfigError(f"paths.{field}", "required but not set")
    if not os.path.exists(value):
        raise ConfigError(f"paths.{field}", f"{value} does not exist")
    return value


def _optional(cfg, field):
    value = cfg["paths"][field]
    if value is not None and not os.path.exists(value):
        raise ConfigError(f"paths.{field}", f"{value} does not exist")
    return value


def _run_dir(args, cfg, command) -> str:
    if args.out:
        out = args.out
    else:
        root = cfg["paths"]["output_root"] or os.environ.get(cfgmod.OUTPUT_ROOT_ENV) or "runs"
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = os.path.join(root, f"{stamp}-{command}")
        k = 1
        while os.path.exists(out):
            out = os.path.join(root, f"{stamp}-{command}-{k}")
            k += 1
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Stage helpers

def _pose_cfg(cfg):
    from .scenario import PoseSamplingConfig
    p = cfg["poses"]
    return PoseSamplingConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})


def _mesh(cfg):
    from .geometry import load_mesh
    from .fixtures import asset_path
    path = _optional(cfg, "mesh") or asset_path("car.obj")
    return load_mesh(path)


def _texture(cfg, mesh, required=False):
    from .pipeline import clean_texture
    from .texture import load_png, texture_for_mesh
    path = _require(cfg, "texture") if required else _optional(cfg, "texture")
    size = cfg["uv"]["texture_size"]
    if path is None:
        return clean_texture(mesh, size)
    image = np.load(path) if path.endswith(".npy") else load_png(path)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError("paths.texture", f"expected an H x W x 3 image, got shape {image.shape}")
    return texture_for_mesh(mesh, image)


def _dataset(cfg):
    from .scenario import SceneCatalog
    root = _require(cfg, "dataset")
    cat = os.path.join(root, "catalog.json")
    if not os.path.exists(cat):
        raise ConfigError("paths.dataset", f"{root} has no catalog.json")
    return root, SceneCatalog.load(cat)


def cmd_prepare_uv(cfg, out):
    from .geometry import bake_texel_mask, distortion_heatmap, save_mesh
    from .fixtures import asset_path
    from .pipeline import load_atlas, prepare_uv
    from .texture import save_mask_png, save_png
    mesh = _mesh(cfg)
    atlas_path = _optional(cfg, "atlas") or asset_path("car_atlas.json")
    atlas = load_atlas(atlas_path)
    size = cfg["uv"]["texture_size"]
    heat = cfg["uv"]["heatmap_size"]
    result = prepare_uv(mesh, atlas, cfg["uv"]["iterations"])
    save_mesh(result.mesh, os.path.join(out, "mesh.obj"))
    shutil.copyfile(atlas_path, os.path.join(out, "atlas.json"))
    save_png(distortion_heatmap(mesh, heat, heat), os.path.join(out, "distortion_before.png"))
    save_png(distortion_heatmap(result.mesh, heat, heat), os.path.join(out, "distortion_after.png"))
    save_mask_png(bake_texel_mask(result.mesh, size, size), os.path.join(out, "texel_mask.png"))
    report = {"energy_before": result.before.energy, "energy_after": result.after.energy,
              "stretched_before": result.before.stretched_count, "stretched_after": result.after.stretched_count,
              "compressed_before": result.before.compressed_count,
              "compressed_after": result.after.compressed_count,
              "traces": result.traces}
    _write_json(report, os.path.join(out, "uv_report.json"))
    log.info("distortion energy %.6g -> %.6g", result.before.energy, result.after.energy)


def cmd_render_dataset(cfg, out):
    from .pipeline import render_datasets
    from .scenario import build_scene_catalog
    from .texture import save_png
    mesh = _mesh(cfg)
    clean = _texture(cfg, mesh)
    catalog = build_scene_catalog(cfg["scenes"]["n_train"], cfg["scenes"]["n_test"], cfg["seed"])
    paths = render_datasets(mesh, clean, catalog, _pose_cfg(cfg), out, variants=cfg["scenes"]["variants"],
                            mix=tuple(cfg["scenes"]["appearance_mix"]),
                            seed=cfg["seed"],
                            progress=lambda name, i, n: log.debug("%s %d/%d", name, i, n))
    save_png(clean.image, os.path.join(out, "texture_clean.png"))
    _write_json({k: os.path.relpath(v, out) for k, v in paths.items()}, os.path.join(out, "datasets.json"))


def cmd_train_victim(cfg, out):
    from .pipeline import ATTACK_SET, MANIFEST, TEST_SET, VICTIM_SET
    from .victim import Architecture, TrainConfig, load_training_set, save_weights, train_victim
    root, _ = _dataset(cfg)
    sets = [os.path.join(root, s, MANIFEST) for s in (VICTIM_SET, ATTACK_SET)]
    sets = [p for p in sets if os.path.exists(p)]
    if not sets:
        raise ConfigError("paths.dataset", "no training manifests found")
    v = dict(cfg["victim"])
    arch = Architecture(input_size=cfg["poses"]["width"], activation=v.pop("activation"))
    if cfg["poses"]["width"] != cfg["poses"]["height"]:
        raise ConfigError("poses.height", "the detector expects square frames")
    tc = TrainConfig(seed=cfg["seed"], **v)
    data = load_training_set(sets)
    test_path = os.path.join(root, TEST_SET, MANIFEST)
    held = load_training_set(test_path) if os.path.exists(test_path) else None
    result = train_victim(data, tc, arch, held_out=held,
                          progress=lambda e, l: log.info("epoch %d loss %.5f", e, l))
    save_weights(result.weights, os.path.join(out, "weights.cfw"))
    _write_json({"history": result.history, "held_out_p05": result.held_out_p05,
                 "held_out_frames": result.held_out_frames, "train_frames": len(data.images)},
                os.path.join(out, "train_report.json"))
    log.info("held-out P@0.5 %s", result.held_out_p05)


def _attack_parts(cfg):
    from .attack import AttackConfig, LossConfig
    from .composer import EotConfig
    a = dict(cfg["attack"])
    use_eot = a.pop("use_eot")
    eot = EotConfig(seed=cfg["seed"], brightness=cfg["eot"]["brightness"],
                    contrast=tuple(cfg["eot"]["contrast"]), noise_std=cfg["eot"]["noise_std"]) if use_eot else None
    return LossConfig(**cfg["loss"]), AttackConfig(seed=cfg["seed"], **a), eot


def cmd_optimize(cfg, out):
    from .attack import optimize_texture, write_loss_log
    from .composer import MaskMapSpec
    from .attack import load_plans
    from .pipeline import ATTACK_SET, MANIFEST, scenes_by_id
    from .scenario import read_manifest
    from .victim import load_weights
    weights_path = _require(cfg, "weights")
    root, catalog = _dataset(cfg)
    mesh = _mesh(cfg)
    t0 = _texture(cfg, mesh)
    weights = load_weights(weights_path)
    loss_cfg, attack_cfg, eot = _attack_parts(cfg)
    manifest = os.path.join(root, ATTACK_SET, MANIFEST)
    records = read_manifest(manifest)
    plans = load_plans(mesh, t0.mask, records, os.path.dirname(manifest), scenes_by_id(catalog), attack_cfg,
                       MaskMapSpec(cfg["mask"]["c_t"], cfg["mask"]["c_n"]))
    result = optimize_texture(mesh, t0, records, weights, loss_cfg, attack_cfg, eot, plans=plans,
                              progress=lambda s, e, r: log.debug("step %d epoch %d total %.5f", s, e, r.total))
    np.save(os.path.join(out, "texture_adv.npy"), result.texture.image)
    write_loss_log(result.log, os.path.join(out, "loss_log.csv"))
    means = result.epoch_means()
    _write_json({"epoch_mean_total": means, "steps": len(result.log)}, os.path.join(out, "optimize_report.json"))
    log.info("epoch mean loss %s", means)


def cmd_evaluate(cfg, out):
    from .evaluation import EvalReport, SweepTemplate, emit_report, evaluate_frames, turntable_accuracy
    from .pipeline import clean_texture
    from .render_ref import render_ref
    from .scenario import desk_scenario
    from .texture import random_texture
    from .victim import load_weights
    weights = load_weights(_require(cfg, "weights"))
    root, catalog = _dataset(cfg)
    mesh = _mesh(cfg)
    adv = _texture(cfg, mesh, required=True)
    size = cfg["uv"]["texture_size"]
    textures = [("clean", clean_texture(mesh, size)),
                ("random", random_texture(mesh, cfg["eval"]["random_seed"], size, size)),
                ("adversarial", adv)]
    pose_cfg = _pose_cfg(cfg)
    scenario = desk_scenario(catalog.test, pose_cfg, offset=len(catalog.train))
    e = cfg["eval"]
    template = SweepTemplate(r=e["sweep_distance"] * pose_cfg.distance_scale, theta=e["sweep_polar"],
                             fov_y=pose_cfg.fov_y, width=pose_cfg.width, height=pose_cfg.height,
                             target=tuple(pose_cfg.target))
    reports, frames, details = [], [], {}
    for name, tex in textures:
        refs = [render_ref(mesh, tex, pose, scene) for pose, scene in scenario]
        report: EvalReport = evaluate_frames(weights, [r.image for r in refs], [r.box for r in refs],
                                             texture_id=name, detector_id=os.path.basename(cfg["paths"]["weights"]))
        seq = turntable_accuracy(mesh, tex, weights, catalog.test[0], e["sweep_frames"], template)
        report.a_physical = seq.a_physical
        reports.append(report)
        details[name] = {"p_at_05": report.p_at_05, "asr": report.asr, "empty_predictions": report.empty_predictions,
                         "f_d": seq.f_d, "f_o": seq.f_o, "a_physical": seq.a_physical,
                         "frames": len(report.records)}
        step = max(1, len(refs) // max(e["annotate"], 1))
        for k in range(0, len(refs), step)[:e["annotate"]]:
            frames.append((f"{name}_{k:03d}", refs[k].image, report.records[k]))
        log.info("%s: P@0.5 %.3f ASR %.3f A %.3f", name, report.p_at_05, report.asr, seq.a_physical)
    emit_report(reports, out, frames)
    _write_json(details, os.path.join(out, "eval_report.json"))


def cmd_export(cfg, out):
    from .texture import save_mask_png, save_png
    mesh = _mesh(cfg)
    tex = _texture(cfg, mesh, required=True)
    save_png(tex.image, os.path.join(out, "texture.png"))
    save_mask_png(tex.mask, os.path.join(out, "texel_mask.png"))


COMMANDS = {"prepare-uv": cmd_prepare_uv, "render-dataset": cmd_render_dataset,
            "train-victim": cmd_train_victim, "optimize": cmd_optimize, "evaluate": cmd_evaluate,
            "export": cmd_export}


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _fail(field, message, code=1):
    print(f"camotex-error {json.dumps({'field': field, 'message': message})}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        # validate the stage's inputs before creating the run directory
        _prevalidate(args.command, cfg)
        out = _run_dir(args, cfg, args.command)
        cfgmod.dump(cfg, os.path.join(out, "resolved_config.yaml"))
        with open(os.path.join(out, "seed"), "w", encoding="utf-8") as fh:
            fh.write(f"{cfg['seed']}\n")
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        return _fail(exc.field, str(exc))
    except (OSError, ValueError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc))
    print(out)
    return 0


REQUIRED = {"train-victim": ("dataset",), "optimize": ("weights", "dataset"),
            "evaluate": ("weights", "dataset", "texture"), "export": ("texture",)}


def _prevalidate(command, cfg):
    for field in REQUIRED.get(command, ()):
        _require(cfg, field)
    for field in ("mesh", "atlas", "texture", "dataset", "weights"):
        _optional(cfg, field)


if __name__ == "__main__":
    raise SystemExit(main())
