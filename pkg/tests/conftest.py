import numpy as np
import pytest

from mominfer.memtrack import MemorySystem
from mominfer.model import Model, ModelConfig, init_weights
from mominfer.tensor import ExecContext

# small GQA model for fast structural tests
SMALL = ModelConfig(n_layers=2, d_model=64, n_heads=4, n_kv_heads=2, d_ff=256, vocab_size=512, seed=3)


@pytest.fixture(scope="session")
def small_weights():
    return init_weights(SMALL)


@pytest.fixture(scope="session")
def desk_weights():
    return init_weights(ModelConfig())


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the summary."""
    def log(line: str) -> None:
        _ACCEPTANCE.append(line)
        print(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def make_model(weights, compute=True, device=None, host=None):
    ctx = ExecContext(MemorySystem(device, host), compute=compute)
    return Model(weights, ctx)


def tokens_for(config, n, seed=0):
    return np.random.default_rng(seed).integers(0, config.vocab_size, n).tolist()


def reference_logits(weights, tokens):
    """Float64 numpy forward pass written independently of the engine kernels."""
    cfg = weights.config
    hd, H, Hkv = cfg.head_dim, cfg.n_heads, cfg.n_kv_heads
    g = {k: v.astype(np.float64) for k, v in weights.globals.items()}
    x = g["embed"][tokens]
    S = len(tokens)
    pos = np.arange(S, dtype=np.float64)[:, None]
    freq = cfg.rope_theta ** (-2.0 * np.arange(hd // 2) / hd)
    cos, sin = np.cos(pos * freq), np.sin(pos * freq)

    def norm(z, gain):
        return z / np.sqrt((z * z).mean(axis=1, keepdims=True) + cfg.norm_eps) * gain

    def rope(z, heads):
        z = z.reshape(S, heads, hd // 2, 2)
        a, b = z[..., 0], z[..., 1]
        c, s = cos[:, None, :], sin[:, None, :]
        return np.stack([a * c - b * s, a * s + b * c], axis=-1).reshape(S, heads * hd)

    mask = np.tril(np.ones((S, S), bool))
    for lw in weights.layers:
        w = {k: v.astype(np.float64) for k, v in lw.items()}
        h = norm(x, w["attn_norm"])
        q = rope(h @ w["wq"], H).reshape(S, H, hd)
        k = rope(h @ w["wk"], Hkv).reshape(S, Hkv, hd)
        v = (h @ w["wv"]).reshape(S, Hkv, hd)
        att = np.empty((S, H, hd))
        for head in range(H):
            kv = head // (H // Hkv)
            sc = q[:, head] @ k[:, kv].T / np.sqrt(hd)
            sc = np.where(mask, sc, -np.inf)
            p = np.exp(sc - sc.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            att[:, head] = p @ v[:, kv]
        x = x + att.reshape(S, H * hd) @ w["wo"]
        h = norm(x, w["mlp_norm"])
        gate = h @ w["w_gate"]
        x = x + (gate / (1 + np.exp(-gate)) * (h @ w["w_up"])) @ w["w_down"]
    return norm(x, g["final_norm"]) @ g["lm_head"]
