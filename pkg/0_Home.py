import streamlit as st

from services import __version__
from services.losses import LOSS_NAMES
from services.settings import configure_logging, get_settings

st.set_page_config(page_title="Top-K Explorer", layout="wide")
configure_logging()

st.sidebar.title("Navigation")
st.sidebar.markdown(f"topk **{__version__}**")

st.title("🎯 Top-K Explorer")
st.write("Explore top-K losses, their smoothed versions and the results produced by the command line.")

st.markdown("""
### What you can do:
- 🔺 **Level Sets**: draw any loss of the zoo on the 2·Δ3 simplex
- 📈 **Experiment Results**: upload a CSV written by `python cli.py ...` and plot it
""")

st.subheader("Losses available")
st.write(", ".join(f"`{name}`" for name in LOSS_NAMES))

settings = get_settings()
st.caption(f"CLI results are written to `{settings.output_dir}/` unless `--out` is given.")

st.info("Use the sidebar to move between pages.")
