"""``patchforge`` command line.

Exit codes: 0 success, 1 configuration or input error, 2 component or
transport error, 3 attack failed within its budget.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import click

from .attack import run_attack
from .config import RunConfig, load_config
from .diffusion import build_backend
from .errors import (
    CalibrationError,
    ConfigurationError,
    DatasetError,
    InputError,
    PatchforgeError,
)
from .evaluation import (
    Components,
    evaluate_impersonation,
    run_ablation,
    sample_pairs,
    scan_dataset,
    summary_table,
    universality_eval,
)
from .imaging import load_image, save_image
from .oracle import LinearOracle, RemoteOracle
from .render import AffineReconstruction, PatchRegion, Renderer, load_mask
from .toy import toy_oracle, write_dataset

log = logging.getLogger("patchforge")

EXIT_OK, EXIT_CONFIG, EXIT_COMPONENT, EXIT_FAILED = 0, 1, 2, 3
_CONFIG_ERRORS = (ConfigurationError, InputError, DatasetError, CalibrationError, FileNotFoundError)


# -- component construction -----------------------------------------------------------


def build_region(cfg: RunConfig) -> PatchRegion:
    r = cfg.renderer
    space = "uv" if r.mode == "uv" else "image"
    size = r.uv_size if r.mode == "uv" else cfg.data.image_size
    if r.region == "lower_face":
        return PatchRegion.lower_face(size, size, space)
    if r.region == "rectangle":
        if r.rectangle is None:
            raise ConfigurationError("renderer.region 'rectangle' needs renderer.rectangle")
        return PatchRegion.rectangle(size, size, *r.rectangle, space=space)
    if r.mask_path is None:
        raise ConfigurationError("renderer.region 'mask' needs renderer.mask_path")
    return PatchRegion(load_mask(r.mask_path), space)


def build_renderer(cfg: RunConfig) -> Renderer:
    region = build_region(cfg)
    if cfg.renderer.mode == "uv":
        return Renderer(region, "uv", provider=AffineReconstruction((cfg.renderer.uv_size,) * 2))
    return Renderer(region)


def build_oracle(cfg: RunConfig, model_id: Optional[str] = None):
    o, size = cfg.oracle, cfg.data.image_size
    if o.kind == "remote":
        if not o.endpoint:
            raise ConfigurationError("oracle.kind 'remote' needs oracle.endpoint")
        return RemoteOracle(o.endpoint, model=o.model, dim=o.dim, attempts=o.attempts, timeout=o.timeout)
    if o.kind == "toy":
        oracle = toy_oracle(o.seed, size, o.dim, o.region_weight, PatchRegion.lower_face(size, size))
    else:
        oracle = LinearOracle.from_seed((3, size, size), o.dim, o.seed)
    if model_id is not None:
        oracle.model_id = model_id
    return oracle


def build_components(cfg: RunConfig) -> Components:
    options = dict(cfg.backend.options)
    if cfg.backend.kind == "standin":
        options.setdefault("image_size", cfg.data.image_size)
    return Components(build_backend(cfg.backend.kind, **options), build_renderer(cfg), build_oracle(cfg))


# -- plumbing ---------------------------------------------------------------------------


def _run_dir(cfg: RunConfig, kind: str, out: Optional[str], run_id: Optional[str]) -> Path:
    run_id = run_id or f"{kind}-{time.strftime('%Y%m%d-%H%M%S')}-{cfg.config_hash()[:8]}"
    path = Path(out or cfg.out) / run_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(cfg: RunConfig, command: str, **fields) -> dict:
    return {"command": command, "config_hash": cfg.config_hash(), "config": cfg.canonical(), **fields}


def exit_codes(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except _CONFIG_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (PatchforgeError, OSError) as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_COMPONENT)
        sys.exit(code or EXIT_OK)

    return wrapper


def _config(path, overrides) -> RunConfig:
    cfg = load_config(path, tuple(overrides))
    log.debug("effective config:\n%s", cfg.dump())
    return cfg


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="YAML run configuration.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Override a config value, e.g. --set attack.eta=0.02.")
out_option = click.option("--out", default=None, help="Output root; artifacts go to <out>/<run-id>/.")
run_id_option = click.option("--run-id", default=None, help="Name of the run directory.")


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging.")
def main(verbose: int):
    """Diffusion-latent adversarial patches against face recognition."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@main.command("attack")
@config_option
@set_option
@click.option("--source", required=True, help="Source face PNG.")
@click.option("--target", required=True, help="Target face PNG.")
@out_option
@run_id_option
@exit_codes
def cmd_attack(config_path, overrides, source, target, out, run_id):
    """Optimise one patch that makes SOURCE verify as TARGET."""
    cfg = _config(config_path, overrides)
    for p in (source, target):
        if not Path(p).is_file():
            raise InputError(f"image {p} does not exist")
    x, x_tar = load_image(source, Path(source).parent.name), load_image(target, Path(target).parent.name)
    comps = build_components(cfg)
    run = _run_dir(cfg, "attack", out, run_id)

    with open(run / "epochs.jsonl", "w", encoding="utf-8") as fh:
        def on_epoch(report, decision, queries):
            row = {"epoch": report.epoch, **report.as_log(), "similarity": decision.similarity,
                   "queries_so_far": queries}
            fh.write(json.dumps(row) + "\n")

        res = run_attack(x, x_tar, cfg.attack_config(), comps.backend, comps.renderer, comps.oracle, on_epoch)

    save_image(res.final_patch, run / "patch.png")
    save_image(res.final_adv_face, run / "adv_face.png")
    _write_json(run / "manifest.json", _manifest(
        cfg, "attack", source=str(source), target=str(target),
        success=res.success, nq=res.nq, epochs_used=res.epochs_used,
        similarity_trace=res.similarity_trace, query_trace=res.query_trace,
        loss_trace=[asdict(r) for r in res.loss_trace],
        artifacts={"patch": "patch.png", "adv_face": "adv_face.png", "epochs": "epochs.jsonl"},
    ))
    click.echo(json.dumps({"run": str(run), **res.summary()}))
    return EXIT_OK if res.success else EXIT_FAILED


def _pairs(cfg: RunConfig, comps: Components, dataset: Optional[str]):
    root = dataset or cfg.data.root
    if root is None:
        raise ConfigurationError("no dataset: set data.root or pass --dataset")
    screen = comps.oracle if cfg.data.screen else None
    return sample_pairs(root, cfg.data.pairs, cfg.data.pair_seed, screen, cfg.attack.threshold)


@main.command("eval")
@config_option
@set_option
@click.option("--dataset", default=None, help="Dataset root (overrides data.root).")
@click.option("--label", default=None, help="Model label for the summary table.")
@out_option
@run_id_option
@exit_codes
def cmd_eval(config_path, overrides, dataset, label, out, run_id):
    """Impersonation sweep over sampled cross-identity pairs."""
    cfg = _config(config_path, overrides)
    comps = build_components(cfg)
    pairs = _pairs(cfg, comps, dataset)
    report = evaluate_impersonation(pairs, cfg.attack_config(), comps)
    run = _run_dir(cfg, "eval", out, run_id)
    _write_json(run / "pairs.json", pairs.to_json())
    _write_json(run / "report.json", _manifest(cfg, "eval", report=report.to_json()))
    table = summary_table([(label or cfg.oracle.kind, Path(dataset or cfg.data.root).name, report)])
    (run / "summary.txt").write_text(table, encoding="utf-8")
    click.echo(table, nl=False)
    return EXIT_OK


@main.command("universality")
@config_option
@set_option
@click.option("--patch", "patch_path", required=True, help="Patch PNG produced by an attack.")
@click.option("--target", required=True, help="Target face PNG.")
@click.option("--pool", default=None, help="Pool dataset root (overrides data.pool_root).")
@click.option("--source-identity", default=None, help="Identity the patch was optimised on.")
@out_option
@run_id_option
@exit_codes
def cmd_universality(config_path, overrides, patch_path, target, pool, source_identity, out, run_id):
    """Apply one patch to every face in a pool and count impersonations."""
    cfg = _config(config_path, overrides)
    root = pool or cfg.data.pool_root
    if root is None:
        raise ConfigurationError("no pool: set data.pool_root or pass --pool")
    for p in (patch_path, target):
        if not Path(p).is_file():
            raise InputError(f"image {p} does not exist")
    faces = [load_image(p, ident) for ident, paths in scan_dataset(root).items() for p in paths]
    comps = build_components(cfg)
    report = universality_eval(load_image(patch_path), faces, load_image(target, Path(target).parent.name),
                               comps, cfg.attack.threshold, source_identity)
    run = _run_dir(cfg, "universality", out, run_id)
    _write_json(run / "report.json", _manifest(cfg, "universality", report=report.to_json()))
    click.echo(json.dumps({"run": str(run), "pool_size": report.pool_size, "universal_asr": report.universal_asr,
                           "exclusive_asr": report.exclusive_asr}))
    return EXIT_OK


@main.command("ablate")
@config_option
@set_option
@click.option("--disable-attn", is_flag=True, help="Zero the attention disruption weight.")
@click.option("--disable-dir", is_flag=True, help="Zero the directional weight.")
@click.option("--dataset", default=None, help="Dataset root (overrides data.root).")
@out_option
@run_id_option
@exit_codes
def cmd_ablate(config_path, overrides, disable_attn, disable_dir, dataset, out, run_id):
    """Compare the full objective against one with loss terms switched off."""
    if not (disable_attn or disable_dir):
        raise ConfigurationError("pass --disable-attn and/or --disable-dir")
    cfg = _config(config_path, overrides)
    ablated_cfg = cfg.model_copy(deep=True)
    if disable_attn:
        ablated_cfg.attack.weights.lambda_attn = 0.0
    if disable_dir:
        ablated_cfg.attack.weights.lambda_dir = 0.0
    comps = build_components(cfg)
    pairs = _pairs(cfg, comps, dataset)
    rep = run_ablation(pairs, cfg.attack_config(), comps, disable_attn, disable_dir)
    run = _run_dir(cfg, "ablate", out, run_id)
    _write_json(run / "pairs.json", pairs.to_json())
    _write_json(run / "report.json", _manifest(cfg, "ablate", ablated_config=ablated_cfg.canonical(),
                                               report=rep.to_json()))
    name = Path(dataset or cfg.data.root).name
    tags = "+".join(t for t, on in (("no-attn", disable_attn), ("no-dir", disable_dir)) if on)
    table = summary_table([("full", name, rep.baseline), (tags, name, rep.ablated)])
    (run / "summary.txt").write_text(table, encoding="utf-8")
    click.echo(table, nl=False)
    return EXIT_OK


@main.command("serve-oracle")
@config_option
@set_option
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True, type=int)
@click.option("--model", default=None, help="Model name to answer to (default: oracle.model).")
@exit_codes
def cmd_serve_oracle(config_path, overrides, host, port, model):
    """Serve the configured local oracle over the embedding wire protocol."""
    from .service import EmbeddingServer

    cfg = _config(config_path, overrides)
    if cfg.oracle.kind == "remote":
        raise ConfigurationError("serve-oracle needs a local oracle kind")
    oracle = build_oracle(cfg, model or cfg.oracle.model)
    try:
        server = EmbeddingServer(oracle, host, port)
    except OSError as exc:
        click.echo(f"error: cannot bind {host}:{port}: {exc}", err=True)
        return EXIT_COMPONENT
    logging.getLogger("patchforge.service").setLevel(logging.INFO)
    click.echo(f"serving {oracle.model_id!r} at {server.url}/v1/embed", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


@main.command("toy-dataset")
@click.argument("root", type=click.Path(file_okay=False))
@click.option("--identities", default=6, show_default=True, type=int)
@click.option("--images", default=2, show_default=True, type=int)
@click.option("--size", default=16, show_default=True, type=int)
@click.option("--first", default=0, show_default=True, type=int, help="First identity index.")
def cmd_toy_dataset(root, identities, images, size, first):
    """Write a synthetic face dataset laid out as ROOT/<identity>/<k>.png."""
    write_dataset(root, identities, images, size, first)
    click.echo(str(root))


if __name__ == "__main__":
    main()
