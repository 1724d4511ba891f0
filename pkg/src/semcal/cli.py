"""Command-line surface.

Subcommands: evaluate, calibrate, train-head, rerank, decode-sim,
report. Every command exits 0 on success, 2 on usage errors, 3 on data
validation errors, and 4 on numeric failures. The SEMCAL_SEED
environment variable overrides any configured seed. Outputs carry no
timestamps, so reruns on identical inputs are byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import calibration, decoding, pipeline, similarity, tensorio, textmetrics
from .confidence import (
    HeadConfig,
    TrainConfig,
    TrainExample,
    load_head,
    save_head,
    train_head,
)
from .errors import NumericError, ValidationError


def _resolve_seed(seed: int) -> int:
    env = os.environ.get("SEMCAL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"SEMCAL_SEED must be an integer, got {env!r}") from None
    return seed


def _load_head_option(head_path: str | None):
    if head_path is None:
        return None, None
    return load_head(head_path)


@click.group()
def cli():
    """Calibration and decoding toolkit for captioning model artifacts."""


@cli.command()
@click.option("--manifest", required=True, type=click.Path(), help="JSONL evaluation manifest.")
@click.option("--out-dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--tau", default=similarity.DEFAULT_TAU, show_default=True, help="Semantic correctness threshold.")
@click.option("--bins", default=10, show_default=True, help="Calibration bin count.")
@click.option("--candidate-index", default=0, show_default=True, help="Which candidate to evaluate per example.")
@click.option("--confidence", "confidence_mode", default="fixed1", show_default=True,
              type=click.Choice(["fixed1", "stored", "head"]),
              help="Confidence source: constant 1.0, the stored mean_confidence, or a trained head.")
@click.option("--head", "head_path", default=None, type=click.Path(), help="head.json descriptor for --confidence head.")
@click.option("--smoothing", default="add1", show_default=True, type=click.Choice(["add1", "none"]))
@click.option("--label", default=None, help="Column label in the printed table.")
def evaluate(manifest, out_dir, tau, bins, candidate_index, confidence_mode, head_path, smoothing, label):
    """Score a manifest and write report.json, bins.csv, scores.csv."""
    if confidence_mode == "head" and head_path is None:
        raise click.UsageError("--confidence head requires --head")
    head, head_config = _load_head_option(head_path)
    eval_set = tensorio.load_manifest(manifest)
    result = pipeline.evaluate_set(
        eval_set,
        tau=tau,
        bins_m=bins,
        candidate_index=candidate_index,
        confidence_mode=confidence_mode,
        head=head,
        head_config=head_config,
        smoothing=smoothing,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_report_json(result.report, out / "report.json")
    pipeline.write_bins_csv(result.bins_by_definition, out / "bins.csv")
    pipeline.write_scores_csv(result.rows, out / "scores.csv")
    similarity.write_semantic_csv(
        out / "semantic.csv", [r.example_id for r in result.rows], result.scored_by_family
    )
    click.echo(pipeline.format_table([(label or Path(manifest).stem, result.report)]))


@cli.command()
@click.option("--logits", "logits_path", required=True, type=click.Path(), help="Tensor file of logit rows (N x V).")
@click.option("--targets", "targets_path", required=True, type=click.Path(), help="Tensor file of target ids (N).")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Where to write temperature.json.")
def calibrate(logits_path, targets_path, out_path):
    """Fit the softmax temperature minimizing target NLL."""
    logits, dims, _ = tensorio.read_tensor(logits_path)
    if len(dims) != 2:
        raise ValidationError(f"logits tensor must be rank 2, got dims {dims}")
    targets, tdims, _ = tensorio.read_tensor(targets_path)
    if len(tdims) != 1:
        raise ValidationError(f"targets tensor must be rank 1, got dims {tdims}")
    z = np.asarray(logits, dtype=np.float64)
    ids = np.asarray(targets, dtype=np.int64)
    fitted = calibration.fit_temperature(z, ids)
    payload = {
        "schema_version": 1,
        "temperature": fitted.T,
        "nll_at_unit": calibration.nll_at_temperature(z, ids, 1.0),
        "nll_at_fit": calibration.nll_at_temperature(z, ids, fitted.T),
        "rows": int(z.shape[0]),
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"fitted temperature {fitted.T:.4f}")


@cli.command("train-head")
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--target", "target_kind", default="clap", show_default=True,
              type=click.Choice(["clap", "sbert", "clap-binary", "sbert-binary"]),
              help="Training target: continuous max-reference similarity or its thresholded indicator.")
@click.option("--tau", default=similarity.DEFAULT_TAU, show_default=True, help="Threshold for binary targets.")
@click.option("--dropout", default=0.1, show_default=True)
@click.option("--learning-rate", default=1e-4, show_default=True)
@click.option("--epochs", default=5, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--optimizer", default="adam", show_default=True, type=click.Choice(["sgd", "adam"]))
@click.option("--lambda", "lambda_conf", default=0.15, show_default=True,
              help="Weight of the confidence loss in the reported combined loss.")
@click.option("--seed", default=0, show_default=True)
def train_head_cmd(manifest, out_dir, target_kind, tau, dropout, learning_rate, epochs,
                   batch_size, optimizer, lambda_conf, seed):
    """Train the confidence head on exported hidden states."""
    seed = _resolve_seed(seed)
    eval_set = tensorio.load_manifest(manifest)
    family = "clap" if target_kind.startswith("clap") else "sbert"
    binary = target_kind.endswith("-binary")

    examples: list[TrainExample] = []
    d_model = None
    for record in eval_set:
        ref_rows = eval_set.embeddings(record, family, tensorio.ROLE_REFERENCES)
        cand_rows = eval_set.embeddings(record, family, tensorio.ROLE_CANDIDATES)
        refs = [similarity.Embedding(family, row) for row in ref_rows]
        for i, cand in enumerate(record.candidates):
            if cand.hidden_state_ref is None:
                raise ValidationError(
                    f"example {record.example_id!r} candidate {i} has no hidden_state_ref"
                )
            hidden = eval_set.hidden_states(cand)
            if d_model is None:
                d_model = hidden.shape[1]
            s = similarity.max_ref_similarity(similarity.Embedding(family, cand_rows[i]), refs)
            target = float(similarity.correctness(s, tau)) if binary else max(0.0, s)
            examples.append(
                TrainExample(
                    hidden_states=hidden,
                    token_mask=np.asarray(cand.token_mask, dtype=bool),
                    target=target,
                )
            )
    if not examples:
        raise ValidationError("manifest contains no trainable candidates")

    head_config = HeadConfig(d_model=d_model, dropout_rate=dropout, seed=seed)
    train_config = TrainConfig(
        learning_rate=learning_rate,
        epochs=epochs,
        batch_size=batch_size,
        lambda_conf=lambda_conf,
        optimizer=optimizer,
        seed=seed,
    )
    result = train_head(examples, head_config, train_config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_head(result.params, head_config, out)
    history = {
        "schema_version": 1,
        "epoch_losses": result.epoch_losses,
        "epoch_combined": result.epoch_combined,
        "n_examples": len(examples),
        "target": target_kind,
        "seed": seed,
    }
    with open(out / "training.json", "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"trained on {len(examples)} sequences; final loss {result.epoch_losses[-1]:.6f}")


def _candidate_hypothesis(record, index, confidence: float) -> decoding.BeamHypothesis:
    cand = record.candidates[index]
    content = [t for t, m in zip(cand.token_ids, cand.token_mask) if m]
    if not content:
        raise ValidationError(
            f"example {record.example_id!r} candidate {index} has no content tokens"
        )
    return decoding.BeamHypothesis(
        tokens=[-1] + content,
        logp=cand.content_logprob(),
        token_confidences=[confidence] * len(content),
    )


@cli.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--alpha", default=1.0, show_default=True, help="Length penalty exponent.")
@click.option("--beta", default=0.3, show_default=True, help="Confidence weight.")
@click.option("--confidence", "confidence_mode", default="stored", show_default=True,
              type=click.Choice(["stored", "head", "fixed1"]))
@click.option("--head", "head_path", default=None, type=click.Path())
def rerank(manifest, out_dir, alpha, beta, confidence_mode, head_path):
    """Rerank each example's candidates by the combined score."""
    if confidence_mode == "head" and head_path is None:
        raise click.UsageError("--confidence head requires --head")
    head, head_config = _load_head_option(head_path)
    eval_set = tensorio.load_manifest(manifest)
    if len(eval_set) == 0:
        raise ValidationError("empty evaluation set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "ranked.csv", "w", encoding="utf-8", newline="") as csv_fh, open(
        out / "chosen.jsonl", "w", encoding="utf-8"
    ) as jsonl_fh:
        writer = csv.writer(csv_fh)
        writer.writerow(
            ["example_id", "rank", "candidate_index", "caption", "logp", "length",
             "mean_confidence", "score"]
        )
        for record in eval_set:
            if not record.candidates:
                raise ValidationError(f"example {record.example_id!r} has no candidates")
            hyps = []
            for i, cand in enumerate(record.candidates):
                conf = pipeline._candidate_confidence(
                    eval_set, record, cand, confidence_mode, head, head_config
                )
                hyps.append(_candidate_hypothesis(record, i, conf))
            order = decoding.rank_order(hyps, alpha, beta)
            for rank, i in enumerate(order):
                hyp = hyps[i]
                writer.writerow(
                    [
                        record.example_id, rank, i, record.candidates[i].caption,
                        repr(hyp.logp), hyp.content_length(),
                        repr(hyp.mean_confidence()),
                        repr(decoding.hypothesis_score(hyp, alpha, beta)),
                    ]
                )
            best = order[0]
            jsonl_fh.write(
                json.dumps(
                    {
                        "example_id": record.example_id,
                        "candidate_index": best,
                        "caption": record.candidates[best].caption,
                        "score": decoding.hypothesis_score(hyps[best], alpha, beta),
                    },
                    sort_keys=True,
                )
            )
            jsonl_fh.write("\n")
    click.echo(f"reranked {len(eval_set)} examples (alpha={alpha}, beta={beta})")


def _hypothesis_json(mode: str, rank: int, hyp: decoding.BeamHypothesis, alpha, beta) -> dict:
    return {
        "mode": mode,
        "rank": rank,
        "tokens": hyp.tokens,
        "content_length": hyp.content_length(),
        "logp": hyp.logp,
        "mean_confidence": hyp.mean_confidence(),
        "score": decoding.hypothesis_score(hyp, alpha, beta),
        "finished": hyp.finished,
    }


@cli.command("decode-sim")
@click.option("--toy-model", "toy_path", required=True, type=click.Path(), help="JSON transition table.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output JSONL of hypotheses.")
@click.option("--beam", "beam_size", default=5, show_default=True)
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--beta", default=0.3, show_default=True)
@click.option("--max-length", default=16, show_default=True)
@click.option("--temperature", default=1.0, show_default=True)
@click.option("--greedy-confidence", default="fixed1", show_default=True,
              type=click.Choice(["fixed1", "scored"]),
              help="Greedy baseline reports 1.0, or head/provider-scored confidences.")
def decode_sim(toy_path, out_path, beam_size, alpha, beta, max_length, temperature, greedy_confidence):
    """Decode a toy transition model with beam search and greedy."""
    model = decoding.ToyModel.from_json(toy_path)
    config = decoding.BeamConfig(
        beam_size=beam_size, alpha=alpha, beta=beta, max_length=max_length,
        temperature=temperature,
    )
    beams = decoding.beam_search(model, config)
    greedy = decoding.greedy_decode(model, config, confidence_mode=greedy_confidence)
    with open(out_path, "w", encoding="utf-8") as fh:
        for rank, hyp in enumerate(beams):
            fh.write(json.dumps(_hypothesis_json("beam", rank, hyp, alpha, beta), sort_keys=True))
            fh.write("\n")
        fh.write(json.dumps(_hypothesis_json("greedy", 0, greedy, alpha, beta), sort_keys=True))
        fh.write("\n")
    top = beams[0]
    if not top.finished:
        click.echo("warning: no hypothesis reached EOS within max-length", err=True)
    click.echo(
        f"beam top score {decoding.hypothesis_score(top, alpha, beta):.6f}, "
        f"greedy score {decoding.hypothesis_score(greedy, alpha, beta):.6f}"
    )


@cli.command()
@click.argument("report_files", nargs=-1, required=True, type=click.Path())
@click.option("--labels", default=None, help="Comma-separated column labels.")
@click.option("--out", "out_path", default=None, type=click.Path(), help="Also write the table to a file.")
def report(report_files, labels, out_path):
    """Print a side-by-side metric table from report.json files."""
    if labels is not None:
        label_list = [s.strip() for s in labels.split(",")]
        if len(label_list) != len(report_files):
            raise click.UsageError("number of labels must match number of reports")
    else:
        label_list = [Path(p).parent.name or Path(p).stem for p in report_files]
    loaded = [(label, pipeline.load_report_json(p)) for label, p in zip(label_list, report_files)]
    table = pipeline.format_table(loaded)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(table)
            fh.write("\n")
    click.echo(table)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except NumericError as exc:
        click.echo(f"error: {exc}", err=True)
        return 4


if __name__ == "__main__":
    sys.exit(main())
