import streamlit as st

from services.errors import InvalidArgumentError
from services.experiments import mesh_roughness, simplex_mesh
from services.losses import LOSS_NAMES, NOISED
from utils.charts import plot_simplex_level_sets

st.set_page_config(page_title="Level Sets", layout="wide")

st.sidebar.title("Navigation")
st.sidebar.markdown("Level sets on 2·Δ3")

st.title("🔺 Level Sets")
st.write("Loss values over the scaled simplex {s ≥ 0, s1 + s2 + s3 = 2}, rescaled to [0, 1].")


@st.cache_data(show_spinner=False)
def cached_mesh(loss, K, y, mesh_steps, replications, epsilon, B, max_margin, tau, gamma, seed):
    return simplex_mesh(
        loss,
        K=K,
        y=y,
        mesh_steps=mesh_steps,
        replications=replications,
        epsilon=epsilon,
        B=B,
        max_margin=max_margin,
        tau=tau,
        gamma=gamma,
        seed=seed,
    )


col1, col2, col3 = st.columns(3)
with col1:
    loss = st.selectbox("Loss", LOSS_NAMES, index=LOSS_NAMES.index("noised_balanced"))
    K = st.number_input("K", min_value=1, max_value=3, value=1)
    y = st.selectbox("True label y", [0, 1, 2])
with col2:
    mesh_steps = st.slider("Mesh steps", 5, 60, 30)
    epsilon = st.number_input("ε", min_value=0.0, value=0.3, step=0.1, disabled=loss not in NOISED)
    B = st.number_input("B", min_value=1, value=1, disabled=loss not in NOISED)
    replications = st.slider("Replications", 1, 200, 100, disabled=loss not in NOISED)
with col3:
    max_margin = st.number_input("Max margin", min_value=0.01, value=0.5, step=0.1)
    tau = st.number_input("τ", min_value=0.01, value=1.0, step=0.1)
    gamma = st.number_input("γ", min_value=0.0, value=2.0, step=0.5)
    seed = st.number_input("Seed", min_value=0, value=0)

try:
    with st.spinner("Evaluating the mesh..."):
        mesh = cached_mesh(
            loss, int(K), int(y), int(mesh_steps), int(replications), float(epsilon), int(B),
            float(max_margin), float(tau), float(gamma), int(seed),
        )
except InvalidArgumentError as e:
    st.error(f"❌ {e}")
else:
    st.plotly_chart(plot_simplex_level_sets(mesh), use_container_width=True)
    c1, c2 = st.columns(2)
    c1.metric("Raw minimum", f"{mesh['raw_value'].min():.4f}")
    c2.metric("Roughness (max step between cells)", f"{mesh_roughness(mesh):.4f}")
    st.download_button("⬇️ Download CSV", mesh.to_csv(index=False), file_name=f"simplex_{loss}.csv")
