"""Tiny two-stream transformer over arbitrary decode orderings.

Predictions come from a positional "query" stream that attends to a
"content" stream carrying token values: queries for a decode rank may only
read content of strictly earlier ranks, and a content state may addition-
ally read its own token.  A position therefore never conditions on its own
value, and one forward pass yields every conditional of a factorization in
parallel.

Everything is plain float64 numpy with hand-written backpropagation, sized
for minutes-scale CPU training; checkpoints are a flat little-endian
float32 blob plus a JSON sidecar describing shapes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InvalidInputError
from ..ordering import Ordering, build_content_mask, build_query_mask
from .base import AnyOrderModel

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u**3)))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * u**2)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=-1, keepdims=True)


def _masked_attention_weights(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-stochastic weights over allowed keys; all-disallowed rows get
    all-zero weights (their attention output is the zero vector)."""
    scores = np.where(mask, scores, -np.inf)
    any_allowed = mask.any(axis=-1, keepdims=True)
    rowmax = np.where(any_allowed, np.max(scores, axis=-1, keepdims=True), 0.0)
    w = np.exp(scores - rowmax)
    denom = w.sum(axis=-1, keepdims=True)
    return w / np.where(denom > 0.0, denom, 1.0)


@dataclass(frozen=True)
class TwoStreamConfig:
    vocab_size: int
    seq_len: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 0  # 0 means 4 * d_model
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise InvalidInputError("d_model must be divisible by n_heads")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)


class TwoStreamTransformer(AnyOrderModel):
    def __init__(self, config: TwoStreamConfig, rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.vocab_size = config.vocab_size
        self.seq_len = config.seq_len
        if params is not None:
            self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.params = self._init_params(rng)

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        std = 0.02
        p: dict[str, np.ndarray] = {}
        p["tok_emb"] = rng.normal(0.0, std, (c.vocab_size + 1, c.d_model))
        p["pos_emb"] = rng.normal(0.0, std, (c.seq_len, c.d_model))
        for l in range(c.n_layers):
            pre = f"layers.{l}."
            p[pre + "ln1.gamma"] = np.ones(c.d_model)
            p[pre + "ln1.beta"] = np.zeros(c.d_model)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + name] = rng.normal(0.0, std, (c.d_model, c.d_model))
            p[pre + "ln2.gamma"] = np.ones(c.d_model)
            p[pre + "ln2.beta"] = np.zeros(c.d_model)
            p[pre + "ffn.w1"] = rng.normal(0.0, std, (c.d_model, c.d_ff))
            p[pre + "ffn.b1"] = np.zeros(c.d_ff)
            p[pre + "ffn.w2"] = rng.normal(0.0, std, (c.d_ff, c.d_model))
            p[pre + "ffn.b2"] = np.zeros(c.d_model)
        p["lnf.gamma"] = np.ones(c.d_model)
        p["lnf.beta"] = np.zeros(c.d_model)
        p["out.w"] = rng.normal(0.0, std, (c.d_model, c.vocab_size))
        p["out.b"] = np.zeros(c.vocab_size)
        return p

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- layer norm ------------------------------------------------------------

    def _ln(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        istd = 1.0 / np.sqrt(var + self.config.ln_eps)
        xhat = (x - mu) * istd
        return gamma * xhat + beta, (xhat, istd, gamma)

    @staticmethod
    def _ln_backward(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xhat, istd, gamma = cache
        dgamma = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
        dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        dxhat = dy * gamma
        dx = istd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    # -- attention -------------------------------------------------------------

    def _to_heads(self, x: np.ndarray) -> np.ndarray:
        b, n, d = x.shape
        h = self.config.n_heads
        return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)

    def _from_heads(self, x: np.ndarray) -> np.ndarray:
        b, h, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def _attend(self, q: np.ndarray, kh: np.ndarray, vh: np.ndarray, mask: np.ndarray):
        dh = self.config.d_model // self.config.n_heads
        qh = self._to_heads(q)
        scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh)
        weights = _masked_attention_weights(scores, mask[:, None, :, :])
        ctx = self._from_heads(weights @ vh)
        return ctx, (qh, weights)

    def _attend_backward(self, dctx, qh, kh, vh, weights):
        dh = self.config.d_model // self.config.n_heads
        dctx_h = self._to_heads(dctx)
        dweights = dctx_h @ vh.transpose(0, 1, 3, 2)
        dvh = weights.transpose(0, 1, 3, 2) @ dctx_h
        dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(dh)
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 1, 3, 2) @ qh
        return self._from_heads(dqh), dkh, dvh

    # -- forward ---------------------------------------------------------------

    def _prepare(self, tokens: np.ndarray, qmask: np.ndarray, cmask: np.ndarray):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
            qmask = qmask[None, :, :] if qmask.ndim == 2 else qmask
            cmask = cmask[None, :, :] if cmask.ndim == 2 else cmask
        b, n = tokens.shape
        if n != self.seq_len:
            raise InvalidInputError(f"model expects sequences of length {self.seq_len}")
        if qmask.ndim == 2:
            qmask = np.broadcast_to(qmask, (b, n, n))
        if cmask.ndim == 2:
            cmask = np.broadcast_to(cmask, (b, n, n))
        return tokens, qmask.astype(bool), cmask.astype(bool)

    def forward(self, tokens: np.ndarray, qmask: np.ndarray, cmask: np.ndarray,
                *, cache: bool = False):
        """Logits at every position: ``(B, N, V)`` (or ``(N, V)`` for a single
        sequence).  ``qmask`` gates the prediction stream, ``cmask`` the
        content stream."""
        single = np.asarray(tokens).ndim == 1
        tokens, qmask, cmask = self._prepare(tokens, qmask, cmask)
        p = self.params
        n = self.seq_len
        h = p["tok_emb"][tokens] + p["pos_emb"][:n]
        g = np.broadcast_to(p["pos_emb"][:n], h.shape).copy()
        caches = []
        for l in range(self.config.n_layers):
            pre = f"layers.{l}."
            hn, ln1h = self._ln(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
            gn, ln1g = self._ln(g, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
            kh = self._to_heads(hn @ p[pre + "attn.wk"])
            vh = self._to_heads(hn @ p[pre + "attn.wv"])
            qg = gn @ p[pre + "attn.wq"]
            qh = hn @ p[pre + "attn.wq"]
            ctx_g, (qgh, wg) = self._attend(qg, kh, vh, qmask)
            ctx_h, (qhh, wh) = self._attend(qh, kh, vh, cmask)
            g = g + ctx_g @ p[pre + "attn.wo"]
            h = h + ctx_h @ p[pre + "attn.wo"]
            g2, ln2g = self._ln(g, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
            h2, ln2h = self._ln(h, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
            ug = g2 @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
            uh = h2 @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
            ag, ah = _gelu(ug), _gelu(uh)
            g = g + ag @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
            h = h + ah @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
            if cache:
                caches.append(
                    dict(hn=hn, gn=gn, ln1h=ln1h, ln1g=ln1g, kh=kh, vh=vh,
                         qgh=qgh, qhh=qhh, wg=wg, wh=wh, ctx_g=ctx_g, ctx_h=ctx_h,
                         ln2g=ln2g, ln2h=ln2h, g2=g2, h2=h2, ug=ug, uh=uh, ag=ag, ah=ah)
                )
        gf, lnf_cache = self._ln(g, p["lnf.gamma"], p["lnf.beta"])
        logits = gf @ p["out.w"] + p["out.b"]
        if cache:
            return logits, dict(tokens=tokens, layers=caches, gf=gf, lnf=lnf_cache)
        return logits[0] if single else logits

    # -- backward --------------------------------------------------------------

    def backward(self, dlogits: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        """Parameter gradients for the batched forward recorded in ``cache``."""
        p = self.params
        grads = self.zero_grads()
        flat = lambda x: x.reshape(-1, x.shape[-1])

        grads["out.w"] += flat(cache["gf"]).T @ flat(dlogits)
        grads["out.b"] += flat(dlogits).sum(axis=0)
        dgf = dlogits @ p["out.w"].T
        dg, dgam, dbet = self._ln_backward(dgf, cache["lnf"])
        grads["lnf.gamma"] += dgam
        grads["lnf.beta"] += dbet
        dh = np.zeros_like(dg)

        for l in reversed(range(self.config.n_layers)):
            pre = f"layers.{l}."
            cc = cache["layers"][l]
            # feed-forward (both streams share weights)
            for stream, dout in (("g", dg), ("h", dh)):
                a, u, x2, ln2 = cc["a" + stream], cc["u" + stream], cc[stream + "2"], cc["ln2" + stream]
                grads[pre + "ffn.w2"] += flat(a).T @ flat(dout)
                grads[pre + "ffn.b2"] += flat(dout).sum(axis=0)
                da = dout @ p[pre + "ffn.w2"].T
                du = da * _gelu_grad(u)
                grads[pre + "ffn.w1"] += flat(x2).T @ flat(du)
                grads[pre + "ffn.b1"] += flat(du).sum(axis=0)
                dx2 = du @ p[pre + "ffn.w1"].T
                dres, dgam, dbet = self._ln_backward(dx2, ln2)
                grads[pre + "ln2.gamma"] += dgam
                grads[pre + "ln2.beta"] += dbet
                if stream == "g":
                    dg = dout + dres
                else:
                    dh = dout + dres
            # attention
            grads[pre + "attn.wo"] += flat(cc["ctx_g"]).T @ flat(dg) + flat(cc["ctx_h"]).T @ flat(dh)
            dctx_g = dg @ p[pre + "attn.wo"].T
            dctx_h = dh @ p[pre + "attn.wo"].T
            dqg, dkh_g, dvh_g = self._attend_backward(dctx_g, cc["qgh"], cc["kh"], cc["vh"], cc["wg"])
            dqh, dkh_h, dvh_h = self._attend_backward(dctx_h, cc["qhh"], cc["kh"], cc["vh"], cc["wh"])
            dkh = self._from_heads(dkh_g + dkh_h)
            dvh = self._from_heads(dvh_g + dvh_h)
            gn, hn = cc["gn"], cc["hn"]
            grads[pre + "attn.wq"] += flat(gn).T @ flat(dqg) + flat(hn).T @ flat(dqh)
            grads[pre + "attn.wk"] += flat(hn).T @ flat(dkh)
            grads[pre + "attn.wv"] += flat(hn).T @ flat(dvh)
            dgn = dqg @ p[pre + "attn.wq"].T
            dhn = dqh @ p[pre + "attn.wq"].T + dkh @ p[pre + "attn.wk"].T + dvh @ p[pre + "attn.wv"].T
            dres_g, dgam_g, dbet_g = self._ln_backward(dgn, cc["ln1g"])
            dres_h, dgam_h, dbet_h = self._ln_backward(dhn, cc["ln1h"])
            grads[pre + "ln1.gamma"] += dgam_g + dgam_h
            grads[pre + "ln1.beta"] += dbet_g + dbet_h
            dg = dg + dres_g
            dh = dh + dres_h

        tokens = cache["tokens"]
        np.add.at(grads["tok_emb"], tokens, dh)
        grads["pos_emb"] += (dg + dh).sum(axis=0)
        return grads

    # -- losses ----------------------------------------------------------------

    def loss_and_grads(
        self,
        tokens: np.ndarray,
        qmasks: np.ndarray,
        cmasks: np.ndarray,
        target_mask: np.ndarray,
        *,
        loss_scale: float = 1.0,
    ) -> tuple[float, int, dict[str, np.ndarray]]:
        """Teacher-forced negative log likelihood over the flagged positions
        plus its parameter gradients.  ``loss_scale`` multiplies both.
        """
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        target_mask = np.atleast_2d(np.asarray(target_mask, dtype=bool))
        logits, cache = self.forward(tokens, qmasks, cmasks, cache=True)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - logz
        b_idx, n_idx = np.nonzero(target_mask)
        n_targets = b_idx.shape[0]
        total = -float(logp[b_idx, n_idx, tokens[b_idx, n_idx]].sum()) * loss_scale
        dlogits = np.exp(logp)
        onehot = np.zeros_like(dlogits)
        onehot[b_idx, n_idx, tokens[b_idx, n_idx]] = 1.0
        dlogits = (dlogits - onehot) * target_mask[:, :, None] * loss_scale
        grads = self.backward(dlogits, cache)
        return total, n_targets, grads

    # -- density-model interface -------------------------------------------------

    def _marginals(self, tokens, ordering, n_visible, queries):
        cmask = build_content_mask(ordering)
        qmask = np.broadcast_to(
            (ordering.ranks[None, :] < n_visible), (self.seq_len, self.seq_len)
        ).astype(np.uint8)
        logits = self.forward(tokens, qmask, cmask)
        return softmax_rows(logits[queries])

    def _chained(self, tokens, ordering, start, stop):
        logits = self.forward(
            tokens, build_query_mask(ordering), build_content_mask(ordering)
        )
        positions = [int(p) for p in ordering.sigma[start:stop]]
        return softmax_rows(logits[positions])

    # -- checkpoints -------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Flat little-endian float32 blob + JSON sidecar with shapes."""
        path = Path(path)
        names = list(self.params)
        blob = b"".join(self.params[k].astype("<f4").tobytes() for k in names)
        path.write_bytes(blob)
        sidecar = {
            "dtype": "<f4",
            "arrays": [{"name": k, "shape": list(self.params[k].shape)} for k in names],
            "config": {
                "vocab_size": self.config.vocab_size,
                "seq_len": self.config.seq_len,
                "d_model": self.config.d_model,
                "n_layers": self.config.n_layers,
                "n_heads": self.config.n_heads,
                "d_ff": self.config.d_ff,
                "ln_eps": self.config.ln_eps,
            },
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "TwoStreamTransformer":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        if sidecar["dtype"] != "<f4":
            raise InvalidInputError(f"unsupported checkpoint dtype {sidecar['dtype']}")
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        params = {}
        offset = 0
        for entry in sidecar["arrays"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            params[entry["name"]] = (
                raw[offset : offset + size].astype(np.float64).reshape(entry["shape"])
            )
            offset += size
        if offset != raw.shape[0]:
            raise InvalidInputError("checkpoint blob length disagrees with sidecar")
        return cls(TwoStreamConfig(**sidecar["config"]), params=params)
