"""Command-line front end: generate, compress, analyze-rank, report, verify, stats, replay.

Standard output carries one JSON summary per command (plus the stats table);
logs and progress go to standard error.
"""

import dataclasses
import enum
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from . import __version__, configure_logging, load_settings
from .analyzer import (
    DEFAULT_THRESHOLD,
    account_for_model,
    mse_report,
    rank_report,
    svd_threshold,
    variant_params,
    write_rows,
)
from .baselines import compress_model, equal_budget_rank, mobe_budget
from .errors import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ArgumentError, CheckpointError, ShapeError, ToolkitError
from .excel_export import save_report_excel
from .factorizer import FactorizeConfig, convert_model
from .manifest import RunManifest, read_manifest, write_manifest
from .model_store import generate_synthetic, load_model, read_tokens, save_model, write_tokens
from .models import Activation, Method, MoBEModel, MoEConfig
from .normalizer import model_stats, stats_report
from .runtime import compare_outputs, moe_forward, random_tokens

logger = logging.getLogger(__name__)

MOE_FIELDS = {f.name for f in dataclasses.fields(MoEConfig)}
FACTORIZE_FIELDS = {f.name for f in dataclasses.fields(FactorizeConfig)}
EXTRA_FIELDS = {"mode", "std", "method", "jobs", "k_prime", "weights", "equal_budget"}
EXTRA_TYPES = {"mode": str, "std": float, "method": str, "jobs": int, "k_prime": int,
               "weights": (list, str), "equal_budget": bool}

METHODS = [m.value for m in Method]
ACTIVATIONS = [a.value for a in Activation]


# --- helpers ---

def _read_config(path):
    """Flat JSON object whose keys mirror MoEConfig / FactorizeConfig field names."""
    if path is None:
        return {}
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ArgumentError(f"{path}: expected a JSON object")
    unknown = set(data) - MOE_FIELDS - FACTORIZE_FIELDS - EXTRA_FIELDS
    if unknown:
        raise ArgumentError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    return {key: _typed(path, key, value) for key, value in data.items()}


def _config_types():
    types = dict(EXTRA_TYPES)
    for cls in (MoEConfig, FactorizeConfig):
        for f in dataclasses.fields(cls):
            types[f.name] = str if issubclass(f.type, enum.Enum) else f.type
    return types


def _typed(path, key, value):
    """Check one JSON value against its field type; ints are accepted where floats are expected."""
    expected = _config_types()[key]
    if value is None:
        return value
    if expected is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    # bool is an int subclass; reject it where a count is expected
    if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
        names = expected.__name__ if isinstance(expected, type) else " or ".join(t.__name__ for t in expected)
        raise ArgumentError(f"{path}: config key {key!r} must be {names}, got {value!r}")
    return value


def _pick(flag, data, key, default=None):
    """Flag beats config file beats default."""
    if flag is not None:
        return flag
    return data.get(key, default)


def _emit(summary):
    click.echo(json.dumps(summary, sort_keys=True))


def _argv(ctx):
    return list(ctx.obj.get("argv") or [])


@contextmanager
def output_guard(*paths):
    """Remove every listed output if the body fails."""
    try:
        yield
    except BaseException:
        for path in paths:
            if path is not None and Path(path).exists():
                Path(path).unlink()
                logger.info("removed partial output %s", path)
        raise


def _sibling(path, suffix):
    path = Path(path)
    return path.with_name(path.name + suffix)


def _manifest(ctx, command, config, seeds, inputs, outputs, started):
    return RunManifest(
        command=command,
        argv=_argv(ctx),
        config=config,
        seeds=seeds,
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        wall_time=time.perf_counter() - started,
    )


def _load_dense(path):
    model = load_model(path)
    if isinstance(model, MoBEModel):
        raise ArgumentError(f"{path}: expected a dense MOEW checkpoint, got a factorized one")
    return model


# --- commands ---

@click.group()
@click.version_option(__version__, prog_name="mobe")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default from MOBE_LOG_LEVEL).")
@click.pass_context
def cli(ctx, log_level):
    """Compress MoE expert weights into shared basis experts and compare against baselines."""
    ctx.ensure_object(dict)
    settings = load_settings()
    ctx.obj["settings"] = settings
    configure_logging((log_level or settings.log_level).upper())


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON with MoEConfig fields.")
@click.option("--mode", type=click.Choice(["gaussian", "planted"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--m", "m", type=int, default=None, help="Planted basis count.")
@click.option("--rank", type=int, default=None, help="Planted rank r (default p).")
@click.option("--activation", type=click.Choice(ACTIVATIONS), default=None)
@click.option("--group-split", type=int, default=None)
@click.option("--std", type=float, default=None, help="Gaussian entry std.")
@click.option("--layers", type=int, default=None)
@click.option("--experts", type=int, default=None)
@click.option("--hidden", type=int, default=None)
@click.option("--intermediate", type=int, default=None)
@click.option("--top-k", type=int, default=None)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
@click.option("--truth-out", type=click.Path(dir_okay=False), default=None,
              help="Where a planted model's ground-truth factors go (default OUT.truth).")
@click.pass_context
def generate(ctx, config_path, mode, seed, m, rank, activation, group_split, std,
             layers, experts, hidden, intermediate, top_k, out, truth_out):
    """Write a synthetic dense checkpoint."""
    started = time.perf_counter()
    data = _read_config(config_path)
    flags = {"layers": layers, "experts": experts, "hidden": hidden,
             "intermediate": intermediate, "top_k": top_k}
    values = {key: _pick(flags.get(key), data, key) for key in MOE_FIELDS}
    missing = [key for key in ("layers", "experts", "hidden", "intermediate", "top_k") if values[key] is None]
    if missing:
        raise ArgumentError(f"missing model dimensions: {', '.join(missing)}")
    config = MoEConfig(**values).validate()

    mode = _pick(mode, data, "mode", "gaussian")
    seed = _pick(seed, data, "seed", 0)
    options = {
        "basis_count": _pick(m, data, "m"),
        "rank": _pick(rank, data, "r"),
        "activation": _pick(activation, data, "activation", "silu"),
        "group_split": _pick(group_split, data, "group_split", 1),
        "std": _pick(std, data, "std", 2.3e-2),
    }
    truth_out = truth_out or (_sibling(out, ".truth") if mode == "planted" else None)

    with output_guard(out, truth_out):
        model, truth = generate_synthetic(config, seed, mode=mode, **options)
        save_model(out, model)
        outputs = [out]
        if truth is not None:
            save_model(truth_out, truth)
            outputs.append(truth_out)
        manifest = _manifest(ctx, "generate", {**config.to_dict(), "mode": mode, **options},
                             {"seed": seed}, [], outputs, started)
        write_manifest(manifest, out)

    _emit({"command": "generate", "mode": mode, "out": str(out),
           "truth": str(truth_out) if truth is not None else None,
           "parameters": model.element_count()})
    return EXIT_OK


def _factorize_config(data, settings, overrides, keep_mu, mu_matrix, no_normalize, early_stop):
    values = {key: value for key, value in data.items() if key in FACTORIZE_FIELDS}
    values.setdefault("steps", settings.steps)
    values.update({key: value for key, value in overrides.items() if value is not None})
    if keep_mu:
        values["keep_mu"] = True
    if mu_matrix:
        values["mu_matrix"] = True
    if no_normalize:
        values["normalize"] = False
    if early_stop:
        values["early_stop"] = True
    if values.get("m") is None:
        raise ArgumentError("--m is required")
    return FactorizeConfig.from_dict(values)


def _parse_weights(text, n):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        weights = [float(w) for w in text]
    else:
        try:
            weights = [float(w) for w in str(text).split(",")]
        except ValueError:
            raise ArgumentError(f"--weights must be comma-separated numbers, got {text!r}") from None
    if len(weights) != n:
        raise ArgumentError(f"--weights needs {n} values, got {len(weights)}")
    return np.asarray(weights)


@cli.command()
@click.option("--in", "in_path", type=click.Path(dir_okay=False), required=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON with FactorizeConfig fields.")
@click.option("--method", type=click.Choice(METHODS), default=None)
@click.option("--m", "m", type=int, default=None, help="Basis count (latent count for molae).")
@click.option("--rank", type=int, default=None, help="Rank r (default p).")
@click.option("--activation", type=click.Choice(ACTIVATIONS), default=None)
@click.option("--lr", type=float, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--group-split", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--weight-decay", type=float, default=None)
@click.option("--keep-mu", is_flag=True, help="Store the normalization mean as a bias.")
@click.option("--mu-matrix", is_flag=True, help="Normalize with the elementwise cross-expert mean.")
@click.option("--no-normalize", is_flag=True, help="Factorize raw weights.")
@click.option("--early-stop", is_flag=True)
@click.option("--equal-budget", is_flag=True,
              help="Baselines: pick the rank whose budget matches MoBE with --m/--rank.")
@click.option("--weights", default=None, help="d2moe: comma-separated expert weights for the shared mean.")
@click.option("--k-prime", type=int, default=None, help="Activated experts stored for inference (<= top-k).")
@click.option("--jobs", type=int, default=None, help="Worker threads (default MOBE_JOBS or all cores).")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None,
              help="Per-step loss CSV (default OUT.trace.csv).")
@click.pass_context
def compress(ctx, in_path, out, config_path, method, m, rank, activation, lr, steps, group_split, seed,
             weight_decay, keep_mu, mu_matrix, no_normalize, early_stop, equal_budget, weights, k_prime,
             jobs, trace_path):
    """Factorize a dense checkpoint with MoBE or a baseline."""
    started = time.perf_counter()
    settings = ctx.obj["settings"]
    data = _read_config(config_path)
    method = Method.parse(_pick(method, data, "method", "mobe"))
    jobs = _pick(jobs, data, "jobs", settings.jobs)
    if settings.deterministic:
        jobs = 1
    k_prime = _pick(k_prime, data, "k_prime")

    model = _load_dense(in_path)
    n, d, p = model.config.experts, model.config.hidden, model.config.intermediate

    if method is Method.MOBE:
        trace_path = trace_path or _sibling(out, ".trace.csv")
        config = _factorize_config(
            data, settings,
            {"m": m, "r": rank, "activation": activation, "lr": lr, "steps": steps,
             "group_split": group_split, "seed": seed, "weight_decay": weight_decay},
            keep_mu, mu_matrix, no_normalize, early_stop,
        )
        with output_guard(out, trace_path):
            compressed, traces = convert_model(model, config, jobs=jobs, progress=True,
                                               activated_override=k_prime)
            save_model(out, compressed)
            rows = [(layer, kind, step, loss)
                    for (layer, kind), trace in sorted(traces.items())
                    for step, loss in enumerate(trace.losses)]
            write_rows(trace_path, rows, columns=["layer", "type", "step", "loss"])
            resolved = {**config.to_dict(), "method": method.value, "jobs": jobs, "k_prime": k_prime}
            write_manifest(_manifest(ctx, "compress", resolved, {"seed": config.seed},
                                     [in_path], [out, trace_path], started), out)
        account = account_for_model(compressed)
        summary = {
            "command": "compress", "method": method.value, "out": str(out),
            "gamma": float(account.gamma),
            "tasks": [
                {"layer": layer, "type": kind, "relative_error": trace.relative_error,
                 "relative_loss": trace.relative_loss, "steps": len(trace.losses),
                 "stopped_early": trace.stopped_early}
                for (layer, kind), trace in sorted(traces.items())
            ],
        }
    else:
        latent_count = _pick(m, data, "m")
        base_rank = _pick(rank, data, "r", p)
        if _pick(equal_budget or None, data, "equal_budget", False):
            if latent_count is None:
                raise ArgumentError("--equal-budget needs the MoBE basis count --m")
            target = mobe_budget(n, p, d, base_rank, latent_count)
            base_rank = equal_budget_rank(method, n, p, d, target, latent_count=latent_count)
            logger.info("%s rank %d matches the MoBE budget of %d parameters", method.label, base_rank, target)
        weights = _parse_weights(_pick(weights, data, "weights"), n)
        with output_guard(out):
            compressed, results = compress_model(model, method, base_rank, latent_count=latent_count,
                                                 weights=weights)
            if k_prime is not None:
                config = dataclasses.replace(compressed.config, activated_override=k_prime).validate()
                compressed = dataclasses.replace(compressed, config=config)
            save_model(out, compressed)
            resolved = {"method": method.value, "r": base_rank, "m": latent_count, "k_prime": k_prime,
                        "weights": None if weights is None else weights.tolist()}
            write_manifest(_manifest(ctx, "compress", resolved, {}, [in_path], [out], started), out)
        summary = {
            "command": "compress", "method": method.value, "out": str(out), "rank": base_rank,
            "gamma": compressed.element_count() / model.element_count(),
            "tasks": [
                {"layer": layer, "type": kind, "sq_error": result.sq_error, "param_count": result.param_count}
                for (layer, kind), result in sorted(results.items())
            ],
        }
    _emit(summary)
    return EXIT_OK


@cli.command("analyze-rank")
@click.option("--in", "in_path", type=click.Path(dir_okay=False), required=True)
@click.option("--threshold", type=float, default=DEFAULT_THRESHOLD, show_default=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def analyze_rank(ctx, in_path, threshold, out):
    """Effective rank of every expert's gate/up matrices."""
    started = time.perf_counter()
    model = load_model(in_path)
    with output_guard(out):
        rows = rank_report(model, threshold)
        write_rows(out, rows)
        write_manifest(_manifest(ctx, "analyze-rank", {"threshold": threshold}, {}, [in_path], [out], started),
                       out)
    _emit({
        "command": "analyze-rank", "out": str(out), "rows": len(rows),
        "svd_threshold": svd_threshold(model.config.intermediate, model.config.hidden),
        "max_effective_rank": max(row.max_re for row in rows),
    })
    return EXIT_OK


@cli.command()
@click.option("--original", type=click.Path(dir_okay=False), required=True)
@click.option("--variants", multiple=True, required=True, type=click.Path(dir_okay=False),
              help="Compressed checkpoints; repeat the flag for several.")
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True, help="MSE CSV.")
@click.option("--params-out", type=click.Path(dir_okay=False), default=None,
              help="Parameter CSV (default OUT.params.csv).")
@click.option("--xlsx", "xlsx_path", type=click.Path(dir_okay=False), default=None,
              help="Also write both tables to an xlsx workbook.")
@click.pass_context
def report(ctx, original, variants, out, params_out, xlsx_path):
    """Reconstruction MSE and parameter counts of compressed variants."""
    started = time.perf_counter()
    reference = _load_dense(original)
    models = []
    for path in variants:
        model = load_model(path)
        if model.config.experts != reference.config.experts or model.config.hidden != reference.config.hidden:
            raise ShapeError(f"{path}: variant does not match the original model",
                             (model.config.experts, model.config.hidden),
                             (reference.config.experts, reference.config.hidden))
        name = model.method.value if isinstance(model, MoBEModel) else "dense"
        models.append((name, model))

    params_out = params_out or _sibling(out, ".params.csv")
    with output_guard(out, params_out, xlsx_path):
        mse_rows = mse_report(reference, models)
        param_rows = variant_params(reference, models)
        write_rows(out, mse_rows)
        write_rows(params_out, param_rows)
        outputs = [out, params_out]
        if xlsx_path:
            save_report_excel(xlsx_path, {
                "mse": (["layer", "type", "method", "mse", "frob_sq"],
                        [dataclasses.astuple(row) for row in mse_rows]),
                "params": (["method", "total", "activated", "gamma"],
                           [dataclasses.astuple(row) for row in param_rows]),
            })
            outputs.append(xlsx_path)
        write_manifest(_manifest(ctx, "report", {}, {}, [original, *variants], outputs, started), out)

    totals = {}
    for row in mse_rows:
        totals[row.method] = totals.get(row.method, 0.0) + row.frob_sq
    _emit({"command": "report", "out": str(out), "params": str(params_out),
           "frob_sq_by_method": totals,
           "gamma_by_method": {row.method: row.gamma for row in param_rows}})
    return EXIT_OK


@cli.command()
@click.option("--original", type=click.Path(dir_okay=False), required=True)
@click.option("--compressed", type=click.Path(dir_okay=False), required=True)
@click.option("--tokens", "token_count", type=int, default=256, show_default=True)
@click.option("--token-file", type=click.Path(dir_okay=False), default=None,
              help="Read the token batch from a MOET file instead of sampling it.")
@click.option("--save-tokens", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--k-override", type=int, default=None, help="Experts activated in the compressed model.")
@click.option("--renorm-topk", is_flag=True, help="Renormalize the selected gate values to sum to one.")
@click.option("--atol", type=float, default=1e-5, show_default=True)
@click.option("--rtol", type=float, default=1e-4, show_default=True)
@click.pass_context
def verify(ctx, original, compressed, token_count, token_file, save_tokens, seed, k_override, renorm_topk,
           atol, rtol):
    """Forward both models on the same tokens; exit 0 iff outputs agree within tolerance."""
    reference = load_model(original)
    candidate = load_model(compressed)
    ref_cfg, cand_cfg = reference.config, candidate.config
    if (ref_cfg.layers, ref_cfg.experts, ref_cfg.hidden) != (cand_cfg.layers, cand_cfg.experts, cand_cfg.hidden):
        raise ShapeError("models are not comparable", (ref_cfg.layers, ref_cfg.experts, ref_cfg.hidden),
                         (cand_cfg.layers, cand_cfg.experts, cand_cfg.hidden))

    tokens = read_tokens(token_file) if token_file else random_tokens(token_count, ref_cfg.hidden, seed)
    if save_tokens:
        with output_guard(save_tokens):
            write_tokens(save_tokens, tokens)

    expected = moe_forward(reference, tokens, k_override=ref_cfg.top_k, renorm_topk=renorm_topk)
    actual = moe_forward(candidate, tokens, k_override=k_override, renorm_topk=renorm_topk)
    delta = compare_outputs(expected, actual)
    ok = delta.within(atol, rtol)
    summary = {"command": "verify", "tokens": int(tokens.shape[0]), "max_abs": delta.max_abs,
               "relative": delta.relative, "within_tolerance": ok}

    if isinstance(candidate, MoBEModel):
        dense = moe_forward(candidate, tokens, k_override=k_override, renorm_topk=renorm_topk, materialize=True)
        path = compare_outputs(dense, actual)
        summary["factorized_vs_materialized_max_abs"] = path.max_abs
        if path.max_abs > atol:
            logger.warning("factorized and materialized forward disagree by %.3e", path.max_abs)
            ok = summary["within_tolerance"] = False

    _emit(summary)
    return EXIT_OK if ok else EXIT_NUMERIC


@cli.command()
@click.option("--in", "in_path", type=click.Path(dir_okay=False), required=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def stats(ctx, in_path, out):
    """Mean/std of gate and up weights per layer, plus the model-wide pool."""
    started = time.perf_counter()
    model = load_model(in_path)
    with output_guard(out):
        rows = stats_report(model)
        write_rows(out, rows)
        write_manifest(_manifest(ctx, "stats", {}, {}, [in_path], [out], started), out)

    click.echo("layer\ttype\tmu\tsigma\tmu_omission_cost")
    for row in rows:
        click.echo(f"{row.layer}\t{row.type}\t{row.mu:.6e}\t{row.sigma:.6e}\t{row.mu_omission_cost:.6e}")
    for kind, pooled in model_stats(model).items():
        click.echo(f"all\t{kind}\t{pooled.mu:.6e}\t{pooled.sigma:.6e}\t")
    return EXIT_OK


@cli.command()
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def replay(ctx, manifest_path):
    """Re-run the command recorded in a run manifest."""
    manifest = read_manifest(manifest_path)
    if not manifest.argv:
        raise ArgumentError(f"{manifest_path}: manifest holds no replayable command")
    logger.info("replaying: mobe %s", " ".join(manifest.argv))
    return run(manifest.argv)


def run(argv=None):
    """Invoke the CLI and map every failure to an exit code instead of raising."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rv = cli.main(args=argv, prog_name="mobe", standalone_mode=False, obj={"argv": argv})
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("error: aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except ToolkitError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_IO
    return rv if isinstance(rv, int) else EXIT_OK


def main():
    sys.exit(run())
