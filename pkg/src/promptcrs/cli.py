"""Command-line entry points for data generation, training stages, eval, serving."""

from __future__ import annotations

import json
from pathlib import Path

import click

from .config import PromptConfig, TrainConfig, apply_flat_config, load_flat_config
from .data import load_corpus, split_corpus
from .pipeline import RecommenderPipeline
from .service import RecommenderService, chat_loop, create_app
from .synth import generate_dataset
from .training import load_artifacts, pretrain_backbone, run_stage


@click.group()
def main():
    """Desk-scale knowledge-prompted conversational recommender."""


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n-dialogs", default=200, show_default=True)
@click.option("--n-items", default=50, show_default=True)
@click.option("--n-entities", default=100, show_default=True)
@click.option("--n-relations", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def gen_data(out_dir, n_dialogs, n_items, n_entities, n_relations, seed):
    """Generate a synthetic corpus + knowledge graph."""
    manifest = generate_dataset(out_dir, n_dialogs, n_items, n_entities, n_relations, seed)
    click.echo(json.dumps(manifest, indent=2))


@main.command("pretrain-backbone")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "ckpt_dir", required=True, type=click.Path())
@click.option("--steps", default=300, show_default=True)
@click.option("--seed", default=0, show_default=True)
def pretrain_backbone_cmd(data_dir, ckpt_dir, steps, seed):
    """Self-supervised backbone run; the result is frozen for all later stages."""
    pretrain_backbone(data_dir, ckpt_dir, steps_decoder=steps,
                      steps_encoder=max(1, steps // 2), seed=seed)
    click.echo(f"backbone written to {ckpt_dir}")


def _stage_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True))(fn)
    fn = click.option("--data", "data_dir", type=click.Path(exists=True))(fn)
    fn = click.option("--out", "ckpt_dir", required=True, type=click.Path())(fn)
    fn = click.option("--seed", default=0, show_default=True)(fn)
    return fn


def _run_stage_cmd(stage, ckpt_dir, data_dir, config_path, seed, **overrides):
    cfg = TrainConfig.for_stage(stage, seed=seed, **overrides)
    if config_path:
        cfg = apply_flat_config(cfg, load_flat_config(config_path))
    summary = run_stage(stage, ckpt_dir, data_dir, config=cfg)
    click.echo(json.dumps(summary, indent=2))


@main.command("pretrain-fuse")
@_stage_options
@click.option("--steps", default=500, show_default=True)
@click.option("--lr", default=2e-3, show_default=True)
def pretrain_fuse(ckpt_dir, data_dir, config_path, seed, steps, lr):
    """Entity-prediction pre-training of the fusion parameters."""
    _run_stage_cmd("fuse_pretrain", ckpt_dir, data_dir, config_path, seed,
                   max_steps=steps, lr=lr)


@main.command("train-gen")
@_stage_options
@click.option("--steps", default=500, show_default=True)
def train_gen(ckpt_dir, data_dir, config_path, seed, steps):
    """Train the generation soft prompts on response templates."""
    _run_stage_cmd("generation", ckpt_dir, data_dir, config_path, seed, max_steps=steps)


@main.command("train-rec")
@_stage_options
@click.option("--steps", default=500, show_default=True)
@click.option("--gold-template", is_flag=True, default=False,
              help="use gold templates instead of model-generated ones")
def train_rec(ckpt_dir, data_dir, config_path, seed, steps, gold_template):
    """Train the recommendation soft prompts with templates in the prompt."""
    _run_stage_cmd("recommendation", ckpt_dir, data_dir, config_path, seed,
                   max_steps=steps, gold_template=gold_template)


@main.command("eval")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "valid", "test", "all"]))
@click.option("--split-seed", default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path())
def eval_cmd(ckpt_dir, data_dir, split, split_seed, out_path):
    """Run the full pipeline over a split and report metrics."""
    from .evaluation import evaluate

    arts = load_artifacts(ckpt_dir, data_dir)
    data_root = Path(data_dir or arts.meta()["data_dir"])
    corpus = load_corpus(data_root / "corpus.jsonl", arts.linker, arts.kg)
    if split != "all":
        corpus = split_corpus(corpus, seed=split_seed)[split]
    report = evaluate(ckpt_dir, corpus, data_dir).to_dict()
    text = json.dumps(report, indent=2)
    if out_path:
        Path(out_path).write_text(text)
    click.echo(text)


@main.command("sweep")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", type=click.Path(exists=True))
@click.option("--work", "work_dir", required=True, type=click.Path())
@click.option("--proportions", default="0.2,0.4,0.6,0.8,1.0", show_default=True)
@click.option("--seeds", default=3, show_default=True)
@click.option("--steps", default=None, type=int,
              help="override max_steps for every stage")
@click.option("--split-seed", default=0, show_default=True)
def sweep_cmd(ckpt_dir, data_dir, work_dir, proportions, seeds, steps, split_seed):
    """Data-scarcity sweep: retrain on sampled fractions, evaluate on the test split."""
    from .evaluation import scarcity_sweep

    arts = load_artifacts(ckpt_dir, data_dir)
    data_root = Path(data_dir or arts.meta()["data_dir"])
    corpus = load_corpus(data_root / "corpus.jsonl", arts.linker, arts.kg)
    splits = split_corpus(corpus, seed=split_seed)
    props = [float(p) for p in proportions.split(",")]
    stage_steps = None
    if steps is not None:
        stage_steps = {s: steps for s in ("fuse_pretrain", "generation", "recommendation")}
    rows = scarcity_sweep(
        ckpt_dir, splits["train"], splits["test"], props,
        list(range(seeds)), work_dir, data_dir, stage_steps,
    )
    for row in rows:
        record = {"proportion": row.proportion, "seed": row.seed,
                  "skipped": row.skipped}
        if row.report:
            record.update(row.report.to_dict())
        click.echo(json.dumps(record))


def _build_service(ckpt_dir, data_dir, top_k):
    arts = load_artifacts(ckpt_dir, data_dir)
    return RecommenderService(RecommenderPipeline(arts, top_k=top_k), top_k=top_k)


@main.command("serve")
@click.option("--ckpt-dir", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", type=click.Path(exists=True))
@click.option("--port", default=8000, show_default=True)
@click.option("--top-k", default=3, show_default=True)
def serve(ckpt_dir, data_dir, port, top_k):
    """Serve the HTTP session API."""
    import uvicorn

    app = create_app(_build_service(ckpt_dir, data_dir, top_k))
    uvicorn.run(app, host="0.0.0.0", port=port)


@main.command("chat")
@click.option("--ckpt-dir", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", type=click.Path(exists=True))
@click.option("--top-k", default=3, show_default=True)
def chat(ckpt_dir, data_dir, top_k):
    """Terminal chat against the trained pipeline."""
    chat_loop(_build_service(ckpt_dir, data_dir, top_k))


if __name__ == "__main__":
    main()
