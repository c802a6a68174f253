"""Command-line front end: run experiments, plot traces, summarise support.

Exit codes: 0 success, 2 usage error, 3 runtime error.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from .driver import ALGOS, RunConfig, jpsro_run
from .games import parse_game_spec
from .neupl import counterexample_demo, neupl_jpsro_run
from . import reporting


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(3)


@click.group()
def main():
    """Equilibrium population solvers for small extensive-form games."""


@main.command()
@click.option("--game", required=True,
              help="Game spec, e.g. 'kuhn_poker(players=2)' or 'rps'.")
@click.option("--algo", type=click.Choice(ALGOS), default="jpsro", show_default=True)
@click.option("--objective",
              type=click.Choice(["max_gini", "max_welfare", "max_entropy"]),
              default="max_gini", show_default=True)
@click.option("--solver-eps", type=float, default=0.01, show_default=True,
              help="Relaxation of the restricted equilibrium constraints.")
@click.option("--term-eps", type=float, default=1e-3, show_default=True,
              help="Stop once no player can gain more than this.")
@click.option("--iters", type=int, default=60, show_default=True)
@click.option("--seeds", type=int, default=5, show_default=True,
              help="Number of seeds; seed values are 0..seeds-1.")
@click.option("--topk", type=int, default=96, show_default=True)
@click.option("--payoff", type=click.Choice(["exact", "simulated", "estimator"]),
              default="exact", show_default=True)
@click.option("--embedding-dim", type=int, default=8, show_default=True)
@click.option("--feature-buckets", type=int, default=None,
              help="Hash infoset features into this many rows (parametric).")
@click.option("--out", required=True, type=click.Path())
def run(game, algo, objective, solver_eps, term_eps, iters, seeds, topk,
        payoff, embedding_dim, feature_buckets, out):
    """Run a configuration over several seeds and persist the result bundle."""
    try:
        parse_game_spec(game)
        if seeds < 1:
            raise ValueError("--seeds must be >= 1")
        results = {}
        for seed in range(seeds):
            config = RunConfig(
                game=game, algo=algo, objective=objective,
                solver_epsilon=solver_eps, termination_epsilon=term_eps,
                max_iterations=iters, seed=seed, payoff_mode=payoff,
                topk=topk, embedding_dim=embedding_dim,
                feature_buckets=feature_buckets)
            if algo == "jpsro":
                results[seed] = jpsro_run(config)
            else:
                results[seed] = neupl_jpsro_run(config)
        config_echo = dataclasses.asdict(
            dataclasses.replace(results[0].config, seed=0))
        bundle = reporting.write_run_bundle(out, config_echo, results)
        terminated = sum(1 for r in results.values() if r.terminated)
        click.echo(f"wrote {bundle} ({len(results)} seeds, "
                   f"{terminated} terminated)")
    except click.ClickException:
        raise
    except Exception as exc:
        _fail(exc)


@main.command()
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def plot(bundle, out):
    """Render gap/value figures (SVG) plus their companion CSV."""
    try:
        paths = reporting.plot_bundle(bundle, out)
        for p in paths:
            click.echo(f"wrote {p}")
    except Exception as exc:
        _fail(exc)


@main.command("support-stats")
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--csv-out", type=click.Path(), default=None,
              help="Also write the per-iteration counts as CSV.")
def support_stats(bundle, csv_out):
    """Count joint actions with non-trivial probability per iteration."""
    try:
        _, traces = reporting.load_bundle(bundle)
        per_iter, summary = reporting.support_stat_rows(traces)
        click.echo(reporting.format_table(per_iter))
        click.echo("across iterations:")
        click.echo(reporting.format_table(summary))
        if csv_out:
            reporting.write_csv(csv_out, per_iter)
            click.echo(f"wrote {csv_out}")
    except Exception as exc:
        _fail(exc)


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--iters", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def counterexample(out, iters, seed):
    """Drift study: concurrent training versus reference regularisation."""
    try:
        report = counterexample_demo(seed=seed, iterations=iters)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n")
        rows = []
        for regime, regime_rows in sorted(report["regimes"].items()):
            for r in regime_rows:
                rows.append({"regime": regime, **{k: (v if v is not None else "")
                                                  for k, v in r.items()}})
        reporting.write_csv(out_dir / "drift.csv", rows)
        _plot_drift(report, out_dir / "drift.svg")
        click.echo(reporting.format_table(rows))
        click.echo(f"wrote {out_dir}")
    except Exception as exc:
        _fail(exc)


def _plot_drift(report: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.4, 3.4))
    colors = {"A": "tab:red", "B": "tab:blue", "B-tabular": "tab:green"}
    for regime, rows in sorted(report["regimes"].items()):
        iters = [r["iteration"] for r in rows]
        color = colors.get(regime, "tab:gray")
        ax.plot(iters, [r["max_drift_visited"] for r in rows],
                color=color, lw=1.6,
                label=f"regime {regime} (visited)")
        unvis = [r["tracked_drift_unvisited"] for r in rows]
        ax.plot(iters, [u if u is not None else np.nan for u in unvis],
                color=color, lw=1.2, ls="--",
                label=f"regime {regime} (unvisited)")
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.set_xlabel("iteration")
    ax.set_ylabel("KL drift of prior strategies")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


@main.command("estimator-study")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int, default=1500, show_default=True)
def estimator_study(out, seed, steps):
    """Train the payoff estimator on exact targets and report its error."""
    try:
        from .games import build_game
        from .metagame import evaluate_payoff_tensor
        from .neupl import EmbeddingSets, PayoffEstimator, player_slot_classes
        from .policies import policy_from_table

        game = build_game("rock_paper_scissors")
        pures = []
        for p in range(2):
            row_policies = []
            for a in range(3):
                probs = np.zeros(3)
                probs[a] = 1.0
                row_policies.append(policy_from_table(game, p, {"choice": probs}))
            pures.append(row_policies)
        tensor = evaluate_payoff_tensor(game, pures)
        rng = np.random.default_rng(seed)
        V = EmbeddingSets([[rng.standard_normal(8) for _ in range(3)]
                           for _ in range(2)], 8, player_slot_classes(game))
        estimator = PayoffEstimator(V, seed=seed)
        experience = [((i, j), tensor.values[i, j])
                      for i in range(3) for j in range(3)]
        loss = estimator.train(experience, steps=steps)
        rows = []
        for i in range(3):
            for j in range(3):
                pred = estimator.predict((i, j))
                err = float(np.abs(pred - tensor.values[i, j]).max())
                rows.append({"row": i, "col": j,
                             "exact_p0": float(tensor.values[i, j, 0]),
                             "pred_p0": float(pred[0]),
                             "abs_err": err})
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        reporting.write_csv(out_dir / "errors.csv", rows)
        _plot_estimator(rows, out_dir / "errors.svg")
        click.echo(reporting.format_table(rows))
        click.echo(f"final loss {loss:.3g}, max abs err "
                   f"{max(r['abs_err'] for r in rows):.4f}; wrote {out_dir}")
    except Exception as exc:
        _fail(exc)


def _plot_estimator(rows: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    errs = np.zeros((3, 3))
    for r in rows:
        errs[r["row"], r["col"]] = r["abs_err"]
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(errs, cmap="viridis")
    ax.set_xlabel("column strategy")
    ax.set_ylabel("row strategy")
    ax.set_title("payoff estimator |error|")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


if __name__ == "__main__":
    main()
