"""Command line for the exporter."""

from __future__ import annotations

import logging
import sys

import click

from .backends import make_backend
from .exporter import DEFAULT_STYLE_PREFIX, ExportConfig, export_examples


@click.group()
def cli():
    """Produce semcal interchange files from a captioning model."""


@cli.command()
@click.option("--captions-csv", required=True, type=click.Path(exists=True),
              help="CSV with file_name and caption_1..caption_N columns.")
@click.option("--audio-dir", required=True, type=click.Path(), help="Directory holding the audio clips.")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--mode", default="greedy", show_default=True, type=click.Choice(["greedy", "beams"]))
@click.option("--beams", "n_beams", default=5, show_default=True)
@click.option("--backend", "backend_name", default="synthetic", show_default=True,
              type=click.Choice(["synthetic", "real"]),
              help="synthetic is deterministic and offline; real runs the pretrained models.")
@click.option("--sample-rate", default=16_000, show_default=True)
@click.option("--max-duration", default=30.0, show_default=True)
@click.option("--style-prefix", default=DEFAULT_STYLE_PREFIX, show_default=True)
@click.option("--limit", default=None, type=int, help="Export at most this many clips.")
@click.option("--no-logits", "export_logits", flag_value=False, default=True,
              help="Skip the f64 logit dump used for temperature fitting.")
@click.option("--caption-model", default="MU-NLPC/whisper-small-audio-captioning", show_default=True)
@click.option("--clap-model", default="laion/clap-htsat-unfused", show_default=True)
@click.option("--sbert-model", default="sentence-transformers/all-MiniLM-L6-v2", show_default=True)
def run(captions_csv, audio_dir, out_dir, mode, n_beams, backend_name, sample_rate,
        max_duration, style_prefix, limit, export_logits, caption_model, clap_model,
        sbert_model):
    """Run an export."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    if backend_name == "real":
        backend = make_backend(
            "real",
            caption_model_id=caption_model,
            clap_model_id=clap_model,
            sbert_model_id=sbert_model,
        )
    else:
        backend = make_backend("synthetic")
    config = ExportConfig(
        captions_csv=captions_csv,
        audio_dir=audio_dir,
        out_dir=out_dir,
        mode=mode,
        n_beams=n_beams,
        sample_rate=sample_rate,
        max_duration=max_duration,
        style_prefix=style_prefix,
        export_logits=export_logits,
        limit=limit,
    )
    summary = export_examples(config, backend)
    click.echo(
        f"exported {summary.exported} examples to {summary.manifest_path}"
        + (f" (skipped {len(summary.skipped)})" if summary.skipped else "")
    )
    if summary.exported == 0:
        sys.exit(3)


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
    except (ValueError, RuntimeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
