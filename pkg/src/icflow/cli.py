"""Command line entry point.

Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 failed verification.
"""
from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from .config import ConfigError, configure_torch, load_run_config, write_run_metadata

log = logging.getLogger("icflow")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY = 1, 2, 3


class VerificationFailed(Exception):
    pass


class Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (ConfigError, click.UsageError) as exc:
            click.echo(f"config error: {exc}", err=True)
            ctx.exit(EXIT_CONFIG)
        except VerificationFailed as exc:
            click.echo(f"verification failed: {exc}", err=True)
            ctx.exit(EXIT_VERIFY)
        except click.exceptions.Exit:
            raise
        except Exception as exc:  # noqa: BLE001
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            ctx.exit(EXIT_RUNTIME)


@click.group(cls=Group)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """In-context rectified-flow editing toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")


def _parse_kv(text: str, what: str) -> dict[str, float]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ConfigError(f"bad {what} entry {part!r}, expected key=value")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise ConfigError(f"bad {what} value in {part!r}") from exc
    return out


def _grid(settings):
    from .toybench import GridConfig

    try:
        return GridConfig(**settings.grid)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [data.grid]: {exc}") from exc


def _load_model(checkpoint):
    from .checkpoint import ContainerError, load_checkpoint
    from .latentseq import ChannelStats
    from .sampler import TokenCodec
    from .toybench import GridConfig

    try:
        model, meta = load_checkpoint(checkpoint)
    except ContainerError as exc:
        raise ConfigError(str(exc)) from exc
    model.eval()
    if "dataset" not in meta:
        raise ConfigError(f"{checkpoint} has no dataset metadata (patch size, stats, vocab)")
    d = meta["dataset"]
    stats = ChannelStats(np.asarray(d["stats_mean"], np.float32), np.asarray(d["stats_std"], np.float32))
    return model, TokenCodec(int(d["patch"]), stats), list(d["vocab"]), GridConfig(**d["grid"]), meta


def _sampler_cfg(settings):
    from .sampler import SamplerConfig
    from .schedule import TimestepDistribution

    dist = TimestepDistribution(settings.mu, settings.sigma, settings.alpha)
    return SamplerConfig(settings.num_steps, dist, settings.guidance_scale, settings.seed)


def _read_png(path) -> np.ndarray:
    from PIL import Image

    try:
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


def _write_png(image: np.ndarray, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)).save(path)
    return path


def _tokens(text: str, vocab) -> list[str]:
    toks = text.split()
    if len(toks) == 1:
        toks += ["<none>", "<none>"]
    elif len(toks) == 2:
        toks.append("<none>")
    if len(toks) != 3:
        raise ConfigError(f"instruction {text!r} must have 1 to 3 tokens")
    bad = [t for t in toks if t not in vocab]
    if bad:
        raise ConfigError(f"unknown instruction tokens {bad}")
    return toks


def _write_drift_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["turn", "identity", "retained", "accuracy"])
        for r in rows:
            w.writerow([r.turn, f"{r.identity:.6f}", f"{r.retained:.6f}", f"{r.accuracy:.6f}"])


def _read_drift_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _common_run_options(f):
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML run config.")(f)
    f = click.option("--deterministic", is_flag=True, help="Single-threaded, deterministic kernels.")(f)
    return f


# commands ----------------------------------------------------------------

@main.command("generate-data")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--n", type=int)
@click.option("--seed", type=int)
@click.option("--tasks", help="verb=weight list, e.g. recolor=1,move=0.5")
@click.option("--patch", type=int)
@click.option("--rows", type=int)
@click.option("--cols", type=int)
@click.option("--cell", type=int)
@click.option("--image-format", type=click.Choice(["raw", "png"]))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def cmd_generate_data(out, n, seed, tasks, patch, rows, cols, cell, image_format, config_path):
    """Write a procedural edit dataset."""
    from .toybench import EditDataset

    cfg = load_run_config(config_path, {"data": {"n": n, "seed": seed, "patch": patch, "image_format": image_format,
                                                 "tasks": _parse_kv(tasks, "task") if tasks else None}})
    grid_d = dict(cfg.data.grid)
    grid_d.update({k: v for k, v in {"rows": rows, "cols": cols, "cell": cell}.items() if v is not None})
    cfg.data.grid = grid_d
    grid = _grid(cfg.data)
    try:
        ds = EditDataset.generate(cfg.data.seed, cfg.data.n, grid, cfg.data.patch, cfg.data.tasks)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    path = ds.save(out, cfg.data.image_format)
    click.echo(f"wrote {len(ds.examples)} examples to {path}")


@main.command("train")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@click.option("--steps", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--context-dropout", type=float)
@click.option("--checkpoint-every", type=int)
@click.option("--seed", type=int)
@click.option("--model-dim", type=int)
@click.option("--num-heads", type=int)
@click.option("--depth-double", type=int)
@click.option("--depth-single", type=int)
@_common_run_options
def cmd_train(data_path, out_dir, steps, batch_size, lr, context_dropout, checkpoint_every, seed, model_dim,
              num_heads, depth_double, depth_single, config_path, deterministic):
    """Train the flow model on a dataset; writes checkpoints and loss.csv."""
    from .flow import TrainingData, train
    from .toybench import EditDataset

    configure_torch(deterministic)
    cfg = load_run_config(config_path, {
        "": {"seed": seed, "out_dir": out_dir},
        "train": {"steps": steps, "batch_size": batch_size, "learning_rate": lr,
                  "context_dropout_prob": context_dropout, "checkpoint_every": checkpoint_every, "seed": seed},
        "model": {"model_dim": model_dim, "num_heads": num_heads, "depth_double": depth_double, "depth_single": depth_single},
        "data": {"path": data_path},
    })
    if cfg.data.path is None or cfg.out_dir is None:
        raise ConfigError("train needs --data and --out (or data.path / out_dir in the config)")
    ds = EditDataset.load(Path(cfg.data.path).resolve())
    data = TrainingData.from_dataset(ds)
    # latent width and vocabulary follow the dataset
    model_d = cfg.model.to_dict()
    model_d.update(latent_channels=int(data.target.shape[2]), instruction_vocab=len(ds.vocab))
    from .backbone import ModelConfig

    cfg.model = ModelConfig.from_dict(model_d)
    cfg.data.path = str(Path(cfg.data.path).resolve())
    dist = cfg.train.timestep_distribution(data.target.shape[1])
    meta = {
        "dataset": {
            "patch": ds.patch, "vocab": ds.vocab, "grid": asdict(ds.grid),
            "stats_mean": ds.stats.mean.tolist(), "stats_std": ds.stats.std.tolist(),
        },
        "train": asdict(cfg.train),
        "timestep_distribution": {"mu": dist.mu, "sigma": dist.sigma},
    }
    write_run_metadata(cfg.out_dir, cfg.to_dict(), cfg.seed,
                       {"deterministic": deterministic, "timestep_distribution": meta["timestep_distribution"]})
    model, reports = train(cfg.train, data, cfg.model, cfg.out_dir, meta)
    last = reports[-1].loss if reports else float("nan")
    click.echo(f"trained {len(reports)} steps, final loss {last:.5f}, {model.num_parameters()} parameters -> {cfg.out_dir}")


@main.command("sample")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--context", "contexts", multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--instruction", required=True)
@click.option("--steps", type=int)
@click.option("--guidance", type=float)
@click.option("--seed", type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_common_run_options
def cmd_sample(checkpoint, contexts, instruction, steps, guidance, seed, out, config_path, deterministic):
    """Sample one image conditioned on context PNG(s) and an instruction."""
    import torch

    from .sampler import sample_tokens

    configure_torch(deterministic)
    cfg = load_run_config(config_path, {"sampler": {"num_steps": steps, "guidance_scale": guidance, "seed": seed}})
    model, codec, vocab, grid, _ = _load_model(checkpoint)
    ids = torch.as_tensor([[vocab.index(t) for t in _tokens(instruction, vocab)]])
    ctx, grids = [], []
    for p in contexts:
        c, g = codec.to_tokens(_read_png(p)[None])
        ctx.append(c)
        grids.append(g)
    target_grid = grids[0] if grids else (grid.canvas[0] // codec.patch, grid.canvas[1] // codec.patch)
    toks = sample_tokens(model, ctx, ids, target_grid, _sampler_cfg(cfg.sampler), grids)
    path = _write_png(codec.to_images(toks, target_grid)[0], out)
    click.echo(f"wrote {path}")


@main.command("edit-loop")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--script", "script_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="One instruction per line.")
@click.option("--steps", type=int)
@click.option("--guidance", type=float)
@click.option("--seed", type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_common_run_options
def cmd_edit_loop(checkpoint, image, script_path, steps, guidance, seed, out_dir, config_path, deterministic):
    """Apply instructions in turn, each output feeding the next; writes PNGs and drift.csv."""
    from .plotting import image_strip, plot_drift
    from .sampler import edit_loop
    from .toybench import drift_curve, ids_for, parse

    configure_torch(deterministic)
    cfg = load_run_config(config_path, {"sampler": {"num_steps": steps, "guidance_scale": guidance, "seed": seed}})
    model, codec, vocab, grid, _ = _load_model(checkpoint)
    lines = [ln.strip() for ln in Path(script_path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ConfigError(f"{script_path} contains no instructions")
    script = [tuple(_tokens(ln, vocab)) for ln in lines]
    init = _read_png(image)
    outputs = edit_loop(model, codec, init[None], ids_for(script, vocab)[None], _sampler_cfg(cfg.sampler))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, stack in enumerate(outputs, start=1):
        _write_png(stack[0], out / f"turn_{k:02d}.png")
    image_strip([init] + [o[0] for o in outputs], out / "strip.png")
    # the initial image is parsed into a scene so every turn has a procedural ground truth
    scene = parse(init, grid)
    rows = drift_curve(outputs, [scene], [script])
    _write_drift_csv(rows, out / "drift.csv")
    plot_drift({"model": rows}, out / "drift.svg")
    write_run_metadata(out, cfg.to_dict(), cfg.sampler.seed, {"checkpoint": str(Path(checkpoint).resolve()), "script": lines})
    click.echo(f"wrote {len(outputs)} turns to {out}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--limit", type=int, help="Evaluate only the first N examples.")
@click.option("--drift-scenes", type=int, default=64, show_default=True)
@click.option("--turns", type=int, default=5, show_default=True)
@click.option("--steps", type=int)
@click.option("--guidance", type=float)
@click.option("--seed", type=int)
@_common_run_options
def cmd_eval(checkpoint, data_path, out_dir, limit, drift_scenes, turns, steps, guidance, seed, config_path, deterministic):
    """Edit accuracy per category, context ablation, and multi-turn drift vs a context-free baseline."""
    from .plotting import plot_drift
    from .toybench import EditDataset, drift_benchmark, drift_eval, evaluate_edits

    configure_torch(deterministic)
    cfg = load_run_config(config_path, {"sampler": {"num_steps": steps, "guidance_scale": guidance, "seed": seed}})
    model, codec, vocab, grid, _ = _load_model(checkpoint)
    ds = EditDataset.load(data_path)
    if ds.vocab != vocab:
        raise ConfigError("dataset vocabulary differs from the checkpoint's")
    examples = ds.examples[:limit] if limit else ds.examples
    scfg = _sampler_cfg(cfg.sampler)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    report, _ = evaluate_edits(model, codec, examples, vocab, scfg)
    ablated, _ = evaluate_edits(model, codec, examples, vocab, scfg, use_context=False)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "category", "n", "accuracy", "identity"])
        for name, rep in (("model", report), ("context_ablated", ablated)):
            for row in rep.category_rows():
                w.writerow([name, row["category"], int(row["n"]), f"{row['accuracy']:.6f}", f"{row['identity']:.6f}"])
    curves = {}
    if drift_scenes > 0:
        scenes, scripts = drift_benchmark(cfg.sampler.seed + 1000, drift_scenes, turns, grid)
        report.drift = drift_eval(model, codec, scenes, scripts, vocab, scfg).drift
        base = drift_eval(model, codec, scenes, scripts, vocab, scfg, use_context=False).drift
        _write_drift_csv(report.drift, out / "drift.csv")
        _write_drift_csv(base, out / "drift_baseline.csv")
        curves = {"in-context model": report.drift, "context-free baseline": base}
        plot_drift(curves, out / "drift.svg")
    summary = report.summary() + "\n\ncontext ablated\n" + ablated.summary() + "\n"
    (out / "summary.txt").write_text(summary)
    write_run_metadata(out, cfg.to_dict(), cfg.sampler.seed, {"checkpoint": str(Path(checkpoint).resolve()),
                                                              "data": str(Path(data_path).resolve())})
    click.echo(summary, nl=False)


@main.command("verify-math")
def cmd_verify_math():
    """Check every schedule identity; exits 3 if any fails."""
    from .schedule import verify_identities

    rows = verify_identities()
    width = max(len(r[0]) for r in rows)
    click.echo(f"{'identity':<{width}}  result  max_error   tolerance")
    for name, ok, err, tol in rows:
        click.echo(f"{name:<{width}}  {'pass' if ok else 'FAIL':<6}  {err:<10.3e}  {tol:.0e}")
    failed = [r[0] for r in rows if not r[1]]
    if failed:
        raise VerificationFailed(", ".join(failed))


@main.command("plot")
@click.option("--schedule", "schedules", multiple=True, help="mu=..,sigma=.. (or alpha=..); repeatable.")
@click.option("--drift", "drift_csvs", multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--loss", "loss_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--points", type=int, default=101, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_plot(schedules, drift_csvs, loss_csv, points, out_dir):
    """Schedule CSV/SVG, drift curve SVG and loss curve SVG."""
    from .plotting import plot_drift, plot_loss, plot_schedules
    from .schedule import TimestepDistribution, schedule_table

    if not (schedules or drift_csvs or loss_csv):
        raise ConfigError("nothing to plot: pass --schedule, --drift or --loss")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if schedules:
        tables = {}
        with open(out / "schedule.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mu", "sigma", "t", "lambda", "t_shifted"])
            for spec in schedules:
                kv = _parse_kv(spec, "schedule")
                unknown = set(kv) - {"mu", "sigma", "alpha"}
                if unknown:
                    raise ConfigError(f"unknown schedule keys {sorted(unknown)}")
                try:
                    dist = TimestepDistribution(kv.get("mu", 0.0), kv.get("sigma", 1.0), kv.get("alpha"))
                except ValueError as exc:
                    raise ConfigError(str(exc)) from exc
                rows = schedule_table(dist, points)
                tables[f"mu={dist.mu:.4g}, sigma={dist.sigma:.4g}"] = rows
                for t, lam, ts in rows:
                    w.writerow([f"{dist.mu:.6g}", f"{dist.sigma:.6g}", f"{t:.6g}", f"{lam:.10g}", f"{ts:.10g}"])
        plot_schedules(tables, out / "schedule.svg")
    if drift_csvs:
        plot_drift({Path(p).stem: _read_drift_csv(p) for p in drift_csvs}, out / "drift.svg")
    if loss_csv:
        plot_loss(loss_csv, out / "loss.svg")
    click.echo(f"wrote plots to {out}")


if __name__ == "__main__":
    sys.exit(main())
