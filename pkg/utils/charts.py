import plotly.express as px
import pandas as pd


def _empty(title):
    fig = px.line(pd.DataFrame({"x": [], "y": []}), x="x", y="y", title=title)
    return fig


def plot_simplex_level_sets(mesh, title="🔺 Level sets on 2·Δ3"):
    """
    Ternary heat map of a simplex mesh frame (columns s1, s2, s3, loss_value).
    """
    if mesh is None or len(mesh) == 0:
        return _empty(title)
    fig = px.scatter_ternary(
        mesh,
        a="s1",
        b="s2",
        c="s3",
        color="loss_value",
        color_continuous_scale="Viridis",
        range_color=(0.0, 1.0),
        title=title,
    )
    fig.update_traces(marker={"size": 6, "symbol": "triangle-up"})
    return fig


def plot_sparsity(df, title="🧮 Non-zero gradient coordinates"):
    if df is None or len(df) == 0:
        return _empty(title)
    df = df.sort_values("epsilon")
    # log axis cannot show epsilon = 0
    log_x = bool((df["epsilon"] > 0).all())
    fig = px.line(df, x="epsilon", y="mean_nnz", error_y="std_nnz", markers=True, log_x=log_x, title=title)
    fig.update_layout(xaxis_title="ε", yaxis_title="mean non-zero coordinates")
    return fig


def plot_timing(df, title="⏱️ Evaluation time vs K"):
    if df is None or len(df) == 0:
        return _empty(title)
    fig = px.line(
        df.sort_values("K"),
        x="K",
        y="mean_eval_time",
        error_y="std_eval_time",
        color="loss",
        markers=True,
        title=title,
    )
    fig.update_layout(yaxis_title="seconds per batch")
    return fig


def plot_metrics_history(history, title="📈 Validation metrics per epoch"):
    """
    One line per metric column of a metrics-history frame.
    """
    if history is None or len(history) == 0:
        return _empty(title)
    metrics = [c for c in history.columns if c.endswith("accuracy") or c.endswith("_macro_top_k")]
    long = history.melt(id_vars=["epoch"], value_vars=metrics, var_name="metric", value_name="value").dropna()
    fig = px.line(long, x="epoch", y="value", color="metric", markers=True, title=title)
    fig.update_layout(yaxis_title="top-K accuracy", yaxis_range=[0, 1])
    return fig


def plot_sweep(df, metric="val_macro_top_k_accuracy", title=None):
    """
    Mean of `metric` over seeds for each (loss, value) of a training sweep.
    """
    title = title or f"🔁 {metric} across the sweep"
    if df is None or len(df) == 0:
        return _empty(title)
    summary = df.groupby(["loss", "value"])[metric].agg(["mean", "std"]).reset_index().fillna(0.0)
    fig = px.line(summary, x="value", y="mean", error_y="std", color="loss", markers=True, title=title)
    fig.update_layout(xaxis_title=str(df["param"].iloc[0]), yaxis_title=metric)
    return fig


def figure_for(df):
    """Picks the chart that matches the columns of a CLI result file."""
    columns = set(df.columns)
    if {"s1", "s2", "s3", "loss_value"} <= columns:
        return plot_simplex_level_sets(df)
    if {"epsilon", "mean_nnz"} <= columns:
        return plot_sparsity(df)
    if {"K", "mean_eval_time"} <= columns:
        return plot_timing(df)
    if {"param", "value", "loss"} <= columns:
        return plot_sweep(df)
    if "epoch" in columns:
        return plot_metrics_history(df)
    return None
