"""Operator commands: data generation, two-stage training, encoding,
indexing, queries, evaluation, gradient verification, and serving.

Config files are plain key=value lines matching the TrainConfig /
ServiceConfig field names; command-line flags override file values. Every
command exits 0 on success and 1 with a single `error: ...` line otherwise.
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click
import numpy as np


def read_config(path) -> dict[str, str]:
    """key=value lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (want key=value): {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce(value: str, like) -> object:
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def fail_cleanly(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:  # one-line machine-parseable failure
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
def main() -> None:
    """Hierarchical hash retrieval toolkit."""


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--num-classes", default=8, type=int, show_default=True)
@click.option("--images-per-class", default=200, type=int, show_default=True)
@click.option("--image-size", default=64, type=int, show_default=True)
@click.option("--noise-sigma", default=0.05, type=float, show_default=True)
@fail_cleanly
def gen_data(out_dir, seed, num_classes, images_per_class, image_size, noise_sigma):
    """Generate the synthetic planted-motif set plus split manifests."""
    from .dataset import SyntheticSpec, generate, save_manifest, split
    spec = SyntheticSpec(num_classes=num_classes, images_per_class=images_per_class,
                         image_size=image_size, noise_sigma=noise_sigma)
    entries = generate(spec, seed=seed, out_dir=out_dir)
    train, val, test = split(entries, seed=seed)
    out = Path(out_dir)
    save_manifest(train, out / "manifest.train.jsonl")
    save_manifest(val, out / "manifest.val.jsonl")
    save_manifest(test, out / "manifest.test.jsonl")
    click.echo(f"wrote {len(entries)} images to {out_dir} "
               f"(splits {len(train)}/{len(val)}/{len(test)})")


def _train_config(config_file, **flags):
    from .trainer import TrainConfig
    base = TrainConfig()
    values: dict = {}
    if config_file is not None:
        for key, raw in read_config(config_file).items():
            if hasattr(base, key):
                values[key] = coerce(raw, getattr(base, key))
    for key, val in flags.items():
        if val is not None:
            values[key] = val
    return TrainConfig(**values)


@main.command("train")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--data-root", default=None, type=click.Path())
@click.option("--stage", type=click.Choice(["1", "2", "all"]), default="all",
              show_default=True)
@click.option("--bits", default=None, help="code length, or comma list for a "
              "progressive ascending run")
@click.option("--config", "config_file", default=None, type=click.Path(exists=True))
@click.option("--epochs", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--lr", default=None, type=float)
@click.option("--seed", default=None, type=int)
@click.option("--alpha", default=None, type=float)
@click.option("--resume", default=None, type=click.Path(exists=True),
              help="checkpoint to continue from (required for --stage 2)")
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="checkpoint output path")
@fail_cleanly
def train(manifest, data_root, stage, bits, config_file, epochs, batch_size, lr,
          seed, alpha, resume, out_path):
    """Train stage 1, stage 2, or both; prints one metrics line per epoch."""
    from dataclasses import replace
    from .dataset import load_manifest, split
    from .model import BackboneConfig, Model, load_checkpoint, save_checkpoint
    from .trainer import (TrainData, clone_expert0_to_expert1, progressive_bit_run,
                          stage1_train, stage2_train, train_all)

    bit_list = None
    first_bits = None
    if bits is not None:
        bit_list = [int(b) for b in str(bits).split(",") if b]
        first_bits = bit_list[0]
    config = _train_config(config_file, bits=first_bits, epochs_per_stage=epochs,
                           batch_size=batch_size, lr=lr, seed=seed, alpha=alpha)
    entries = load_manifest(manifest)
    if not entries:
        raise ValueError(f"manifest has no entries: {manifest}")
    root = Path(data_root) if data_root else Path(manifest).parent
    num_classes = max(e.label for e in entries) + 1
    train_e, val_e, _ = split(entries, seed=config.seed)
    data = TrainData.from_entries(train_e, root, num_classes)
    vdata = TrainData.from_entries(val_e, root, num_classes) if val_e else None

    if bit_list is not None and len(bit_list) > 1:
        if stage != "all":
            raise ValueError("progressive runs train both stages; use --stage all")
        models = progressive_bit_run(bit_list, config, data, vdata, log=click.echo)
        for b, model in models.items():
            stem = str(Path(out_path).with_suffix("")) if out_path else "ckpt"
            path = f"{stem}.{b}bit.hmar"
            save_checkpoint(path, model)
            click.echo(f"saved {path}")
        return

    if resume is not None:
        model = load_checkpoint(resume)
        if config.bits != model.bits and bits is not None:
            raise ValueError(f"--bits {config.bits} does not match checkpoint "
                             f"bits {model.bits}")
        config = replace(config, bits=model.bits)
    else:
        if stage == "2":
            raise ValueError("--stage 2 requires --resume CHECKPOINT")
        model = Model(BackboneConfig(num_classes=num_classes), bits=config.bits,
                      seed=config.seed)

    if stage == "1":
        stage1_train(model, config, data, vdata, log=click.echo)
    elif stage == "2":
        clone_expert0_to_expert1(model)
        stage2_train(model, config, data, vdata, log=click.echo)
    else:
        train_all(model, config, data, vdata, log=click.echo)

    path = out_path or f"ckpt_{model.bits}bit.hmar"
    save_checkpoint(path, model)
    click.echo(f"saved {path}")


@main.command("encode")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--data-root", default=None, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@fail_cleanly
def encode(checkpoint, manifest, data_root, out_path):
    """Global codes for every manifest image -> code-db file."""
    from .dataset import load_image, load_manifest
    from .model import load_checkpoint
    from .retrieval import pack_code_set, save_codes
    model = load_checkpoint(checkpoint)
    entries = sorted(load_manifest(manifest), key=lambda e: e.id)
    root = Path(data_root) if data_root else Path(manifest).parent
    signs = (np.stack([model.encode_global(load_image(root / e.path)[None])[0]
                       for e in entries]) if entries
             else np.zeros((0, model.bits), dtype=np.int8))
    save_codes(out_path, pack_code_set(signs, np.asarray([e.id for e in entries],
                                                         dtype=np.uint64), model.bits))
    click.echo(f"encoded {len(entries)} images -> {out_path}")


@main.command("index")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--data-root", default=None, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--alpha", default=0.0, type=float, show_default=True)
@fail_cleanly
def index_cmd(checkpoint, manifest, data_root, out_path, alpha):
    """Code-db plus the cached local feature maps used by local queries."""
    from .dataset import load_manifest
    from .model import load_checkpoint
    from .service import build_index
    model = load_checkpoint(checkpoint)
    entries = load_manifest(manifest)
    root = Path(data_root) if data_root else Path(manifest).parent
    bundle = build_index(model, entries, root, Path(out_path), alpha=alpha)
    click.echo(f"indexed {bundle.codes.count} images -> {out_path}")


def _load_query_image(image, image_id, entries, root):
    from .dataset import load_image
    if (image is None) == (image_id is None):
        raise ValueError("provide exactly one of --image / --image-id")
    if image is not None:
        return load_image(image)
    by_id = {e.id: e for e in entries}
    if image_id not in by_id:
        raise ValueError(f"unknown image id {image_id}")
    return load_image(root / by_id[image_id].path)


@main.command("query-global")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--code-db", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--data-root", default=None, type=click.Path())
@click.option("--image", default=None, type=click.Path(exists=True))
@click.option("--image-id", default=None, type=int)
@click.option("-k", default=10, type=int, show_default=True)
@fail_cleanly
def query_global(checkpoint, code_db, manifest, data_root, image, image_id, k):
    """Whole-image retrieval; prints `rank id distance path` lines."""
    from .dataset import load_manifest
    from .model import load_checkpoint
    from .retrieval import load_codes, pack_signs, top_k_global
    model = load_checkpoint(checkpoint)
    entries = load_manifest(manifest)
    root = Path(data_root) if data_root else Path(manifest).parent
    pixels = _load_query_image(image, image_id, entries, root)
    db = load_codes(code_db)
    signs = model.encode_global(pixels[None])[0]
    result = top_k_global(pack_signs(signs, model.bits)[0], db, k)
    by_id = {e.id: e for e in entries}
    for rank, (iid, dist) in enumerate(zip(result.ids, result.distances), 1):
        entry = by_id.get(int(iid))
        click.echo(f"{rank}\t{int(iid)}\t{int(dist)}\t"
                   f"{entry.path if entry else '?'}")


@main.command("query-local")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--code-db", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--data-root", default=None, type=click.Path())
@click.option("--image", default=None, type=click.Path(exists=True))
@click.option("--image-id", default=None, type=int)
@click.option("--bbox", required=True, help="x1,y1,x2,y2 in query pixels")
@click.option("-k", default=50, type=int, show_default=True)
@click.option("-n", default=10, type=int, show_default=True)
@click.option("--alpha", default=0.0, type=float, show_default=True)
@fail_cleanly
def query_local(checkpoint, code_db, manifest, data_root, image, image_id, bbox,
                k, n, alpha):
    """Region retrieval; prints `rank id score wx1,wy1,wx2,wy2 path` lines."""
    from .dataset import load_image, load_manifest
    from .model import load_checkpoint
    from .retrieval import (BoundingBox, load_codes, local_rerank, pack_signs,
                            top_k_global)
    parts = [int(v) for v in bbox.split(",")]
    if len(parts) != 4:
        raise ValueError(f"--bbox wants x1,y1,x2,y2, got {bbox!r}")
    box = BoundingBox(*parts)
    model = load_checkpoint(checkpoint)
    entries = load_manifest(manifest)
    root = Path(data_root) if data_root else Path(manifest).parent
    by_id = {e.id: e for e in entries}
    pixels = _load_query_image(image, image_id, entries, root)
    box.validate_within(pixels.shape[2], pixels.shape[1])
    db = load_codes(code_db)
    query_words, fbox = model.encode_local_window(pixels, box, alpha=alpha)
    global_signs = model.encode_global(pixels[None])[0]
    candidates = top_k_global(pack_signs(global_signs, model.bits)[0], db, k)
    fmap_dir = Path(str(code_db) + ".fmaps")

    def fmap_for(iid: int) -> np.ndarray:
        cached = fmap_dir / f"{iid}.npy"
        if cached.exists():
            return np.load(cached)
        return model.compute_local_fmap(load_image(root / by_id[iid].path),
                                        alpha=alpha)

    result = local_rerank(query_words, candidates, min(n, k), fmap_for,
                          (fbox.height, fbox.width), model.window_encoder(),
                          pixel_box_size=(box.x2 - box.x1, box.y2 - box.y1))
    for rank, (iid, score) in enumerate(zip(result.ids, result.distances), 1):
        window = result.windows[rank - 1].pixel_box
        entry = by_id.get(int(iid))
        click.echo(f"{rank}\t{int(iid)}\t{int(score)}\t"
                   f"{','.join(str(v) for v in window)}\t"
                   f"{entry.path if entry else '?'}")


@main.command("eval-map")
@click.option("--codes", required=True, type=click.Path(exists=True),
              help="database code-db")
@click.option("--manifest", required=True, type=click.Path(exists=True),
              help="labels for database ids")
@click.option("--query-codes", default=None, type=click.Path(exists=True),
              help="query code-db (defaults to the database itself)")
@click.option("--query-manifest", default=None, type=click.Path(exists=True))
@click.option("-k", "top_k", default=None, type=int,
              help="evaluate over top-K ranks (default: whole database)")
@fail_cleanly
def eval_map(codes, manifest, query_codes, query_manifest, top_k):
    """Mean average precision of one code set queried against another."""
    from .dataset import load_manifest
    from .retrieval import compute_map, load_codes
    db = load_codes(codes)
    db_entries = {e.id: e for e in load_manifest(manifest)}
    q = load_codes(query_codes) if query_codes else db
    q_entries = ({e.id: e for e in load_manifest(query_manifest)}
                 if query_manifest else db_entries)
    num_classes = max(e.label for e in db_entries.values()) + 1

    def one_hot(entries, ids):
        labels = np.array([entries[int(i)].label for i in ids])
        return np.eye(num_classes)[labels]

    value = compute_map(q.words, one_hot(q_entries, q.ids), db,
                        one_hot(db_entries, db.ids), top_k_eval=top_k)
    click.echo(f"mAP\t{value:.6f}")


@main.command("gradcheck")
@fail_cleanly
def gradcheck():
    """Finite-difference verification of every differentiable component."""
    from .checks import GRAD_TOLERANCE, gradcheck_suite
    results = gradcheck_suite()
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        click.echo(f"{name}\t{err:.3e}\t{status}")
        worst = max(worst, err)
    if worst >= GRAD_TOLERANCE:
        raise ValueError(f"gradient check failed: max error {worst:.3e}")
    click.echo(f"all components < {GRAD_TOLERANCE:g}")


@main.command("serve")
@click.option("--config", "config_file", default=None, type=click.Path(exists=True))
@click.option("--checkpoint", default=None, type=click.Path())
@click.option("--code-db", default=None, type=click.Path())
@click.option("--manifest", default=None, type=click.Path())
@click.option("--data-root", default=None, type=click.Path())
@click.option("--host", default=None)
@click.option("--port", default=None, type=int)
@click.option("--static-dir", default=None, type=click.Path())
@fail_cleanly
def serve(config_file, checkpoint, code_db, manifest, data_root, host, port,
          static_dir):
    """Run the query service."""
    from .service import ServiceConfig, run
    values: dict = {}
    if config_file is not None:
        defaults = ServiceConfig(checkpoint="", code_db="")
        for key, raw in read_config(config_file).items():
            if hasattr(defaults, key):
                like = getattr(defaults, key)
                values[key] = coerce(raw, like if like is not None else "")
    for key, val in (("checkpoint", checkpoint), ("code_db", code_db),
                     ("manifest", manifest), ("data_root", data_root),
                     ("host", host), ("port", port), ("static_dir", static_dir)):
        if val is not None:
            values[key] = val
    if "checkpoint" not in values or "code_db" not in values:
        raise ValueError("serve needs checkpoint and code_db (flags or config)")
    run(ServiceConfig(**values))


if __name__ == "__main__":
    main()
