"""Command-line entry points: gen / train / eval / retrieve."""

from __future__ import annotations

import json
from pathlib import Path

import click
import torch

from .augmentation import AugmentationPolicy
from .corpus import generate_synthetic_corpus, load_manifest
from .encoders import ModelConfig
from .pipeline import (
    TrainConfig,
    encode_corpus,
    evaluate,
    load_checkpoint,
    longest_train_moment,
    save_checkpoint,
    train,
    two_stage_inference,
)


def _load_config_file(path: str | None) -> tuple[ModelConfig, TrainConfig, AugmentationPolicy]:
    """Flat JSON config holding model, training, and augmentation keys."""
    raw = json.loads(Path(path).read_text()) if path else {}
    model_config = ModelConfig.from_dict(raw)
    train_config = TrainConfig.from_dict(raw)
    policy = AugmentationPolicy.from_dict(raw.get("augmentation", raw))
    return model_config, train_config, policy


@click.group()
def main():
    """Coarse-to-fine video corpus moment retrieval."""


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--videos", default=50, show_default=True)
@click.option("--frames", default=32, show_default=True)
@click.option("--dim", default=16, show_default=True)
@click.option("--vocab", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
def gen(out, videos, frames, dim, vocab, seed):
    """Generate a synthetic corpus with planted moments."""
    manifest = generate_synthetic_corpus(videos, frames, dim, vocab, seed, out)
    click.echo(f"wrote {len(manifest.videos)} videos, {len(manifest.queries)} queries to {out}")


@main.command("train")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--baseline", is_flag=True, help="train the similarity-only variant")
@click.option("--no-augment", is_flag=True, help="disable embedding augmentation")
def train_cmd(data, config_path, out, baseline, no_augment):
    """Train a model and write a checkpoint."""
    manifest = load_manifest(Path(data) / "manifest.jsonl")
    model_config, train_config, policy = _load_config_file(config_path)
    if baseline:
        train_config.use_fusion = False
    if no_augment:
        train_config.use_augmentation = False
    model, history = train(manifest, model_config, train_config, policy)
    for row in history:
        click.echo(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}")
    save_checkpoint(out, model, train_config, policy,
                    extra={"l_max": longest_train_moment(manifest)})
    click.echo(f"checkpoint written to {out}")


@main.command("eval")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--split", default="val", type=click.Choice(["train", "val"]))
@click.option("--ks", default="1,5,10", show_default=True)
@click.option("--tiou", default=0.7, show_default=True)
@click.option("--task", default="vcmr", type=click.Choice(["vr", "vcmr"]))
@click.option("--baseline", is_flag=True, help="use the similarity-only head")
@click.option("--json", "as_json", is_flag=True, help="emit the report as JSON")
def eval_cmd(data, ckpt, split, ks, tiou, task, baseline, as_json):
    """Evaluate a checkpoint on a corpus split."""
    manifest = load_manifest(Path(data) / "manifest.jsonl")
    model, header = load_checkpoint(ckpt)
    train_config = TrainConfig.from_dict(header.get("train_config") or {})
    train_config.recall_ks = tuple(int(k) for k in ks.split(","))
    train_config.k_videos = max(train_config.k_videos, max(train_config.recall_ks))
    train_config.tiou_threshold = tiou
    l_max = (header.get("extra") or {}).get("l_max")
    report = evaluate(model, manifest, split, train_config, task=task.upper(),
                      baseline=baseline, l_max=l_max)
    click.echo(json.dumps(report.to_json()) if as_json else report.to_table())


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--query-id", required=True)
@click.option("--k", default=10, show_default=True)
def retrieve(data, ckpt, query_id, k):
    """Print the top moment predictions for one query."""
    manifest = load_manifest(Path(data) / "manifest.jsonl")
    model, header = load_checkpoint(ckpt)
    train_config = TrainConfig.from_dict(header.get("train_config") or {})
    query = next((q for q in manifest.queries if q.query_id == query_id), None)
    if query is None:
        raise click.ClickException(f"unknown query id {query_id!r}")
    l_max = (header.get("extra") or {}).get("l_max") or longest_train_moment(manifest)
    encodings, video_ids = encode_corpus(model, manifest)
    with torch.no_grad():
        qe = model.encoder.encode_query(list(query.tokens))
        preds = two_stage_inference(model, encodings, video_ids, qe, k,
                                    train_config.alpha, l_max)
    for p in preds:
        click.echo(f"{p.video_id}  [{p.span.start:3d}, {p.span.end:3d}]  {p.score:+.4f}")


if __name__ == "__main__":
    main()
