import streamlit as st

from services.experiments import timing_slope
from utils.charts import figure_for, plot_sweep
from utils.csv_io import read_csv

st.set_page_config(page_title="Experiment Results", layout="wide")

st.sidebar.title("Navigation")
st.sidebar.markdown("Results written by the CLI")

st.title("📈 Experiment Results")
st.write("Upload a CSV written by one of the CLI subcommands.")

uploaded = st.file_uploader("Result file", type=["csv"])

if uploaded is None:
    st.info("Run e.g. `python cli.py sparsity --out results/sparsity.csv` and upload the file here.")
    st.stop()

try:
    df, meta = read_csv(uploaded)
except Exception as e:
    st.error(f"❌ Could not read the file: {e}")
    st.stop()

with st.expander("⚙️ Configuration recorded in the file"):
    st.json(meta)

st.subheader("📋 Data")
st.dataframe(df, use_container_width=True)

if {"param", "value", "loss"} <= set(df.columns):
    metrics = [c for c in df.columns if c.startswith(("val_", "test_"))]
    metric = st.selectbox("Metric", metrics, index=metrics.index("val_macro_top_k_accuracy") if "val_macro_top_k_accuracy" in metrics else 0)
    fig = plot_sweep(df, metric=metric)
else:
    fig = figure_for(df)

if fig is None:
    st.warning("No chart for this kind of file.")
else:
    st.plotly_chart(fig, use_container_width=True)

if {"K", "median_eval_time"} <= set(df.columns) and df["K"].nunique() >= 3:
    st.subheader("Slope of median time vs K")
    cols = st.columns(df["loss"].nunique())
    for col, name in zip(cols, df["loss"].unique()):
        slope, low, high = timing_slope(df, name, column="median_eval_time")
        col.metric(name, f"{slope * 1e3:.3f} ms/K", f"95% CI {low * 1e3:.3f} .. {high * 1e3:.3f}", delta_color="off")
