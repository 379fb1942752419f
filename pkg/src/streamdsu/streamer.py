"""Incremental inference: audio chunks in, unit ids out.

The frontend is causal, so frame j is final once samples up to
(j+1)·stride have arrived. Each transformer layer keeps its inputs (and
their q/k/v projections) from ``next_out - left`` onwards and emits frame i
as soon as input i+right exists. Frames enter the layer cascade one at a
time, so every emission is logged with the exact number of frontend frames
consumed so far, whatever the chunking.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels as K
from .encoder import UNBOUNDED, Encoder, WindowConfig
from .predictor import Student


class StreamClosedError(RuntimeError):
    pass


class _FrontendStream:
    def __init__(self, enc: Encoder):
        self.enc = enc
        self.stride = enc.cfg.frame_stride_samples
        dt = enc.dtype
        self.bufs = []
        c_in = 1
        for ch, k, s in enc.cfg.conv_spec:
            self.bufs.append(np.zeros((k - s, c_in), dt))  # causal left padding
            c_in = ch
        kp = enc.cfg.pos_conv_kernel
        self.pos_hist = np.zeros((kp - 1, enc.cfg.d_model), dt)
        self.raw: list[np.ndarray] = []
        self.raw_len = 0
        self.samples_in = 0
        self.frames_out = 0

    def remainder(self) -> int:
        """Rows held below the transformer (raw samples, conv buffers, positional history)."""
        return self.raw_len + sum(b.shape[0] for b in self.bufs) + self.pos_hist.shape[0]

    def push(self, samples: np.ndarray) -> np.ndarray:
        self.raw.append(samples)
        self.raw_len += samples.size
        self.samples_in += samples.size
        d = self.enc.cfg.d_model
        if self.samples_in < (self.frames_out + 1) * self.stride:
            return np.empty((0, d), self.enc.dtype)
        rows = np.concatenate(self.raw)[:, None]
        self.raw, self.raw_len = [], 0
        v = self.enc.v
        for i, (_, k, s) in enumerate(self.enc.cfg.conv_spec):
            buf = np.concatenate([self.bufs[i], rows])
            n_out = (buf.shape[0] - k) // s + 1 if buf.shape[0] >= k else 0
            if n_out == 0:
                self.bufs[i] = buf
                return np.empty((0, d), self.enc.dtype)
            out, _ = K.conv1d(buf[: (n_out - 1) * s + k], v(f"frontend.conv{i}.weight"),
                              v(f"frontend.conv{i}.bias"), s, pad_left=0, tag="frontend.conv")
            rows, _ = K.gelu(out)
            self.bufs[i] = buf[n_out * s:]
        h, _ = K.layernorm(rows, v("frontend.norm.gain"), v("frontend.norm.bias"))
        proj, _ = K.linear(h, v("frontend.proj.weight"), v("frontend.proj.bias"), tag="frontend.proj")
        hist = np.concatenate([self.pos_hist, proj])
        pc, _ = K.depthwise_conv1d(hist, v("frontend.posconv.weight"), v("frontend.posconv.bias"),
                                   pad_left=0, tag="frontend.posconv")
        self.pos_hist = hist[hist.shape[0] - self.pos_hist.shape[0]:]
        self.frames_out += proj.shape[0]
        return proj + K.gelu(pc)[0]


class _LayerStream:
    def __init__(self, enc: Encoder, n: int, window: WindowConfig):
        self.enc = enc
        self.pre = f"layers.{n}."
        self.left, self.right = window.left, window.right
        d = enc.cfg.d_model
        empty = np.empty((0, d), enc.dtype)
        self.x = self.q = self.k = self.v = empty
        self.base = 0  # global index of the first stored frame
        self.avail = 0
        self.next_out = 0

    def p(self, name):
        return self.enc.v(self.pre + name)

    @property
    def stored(self) -> int:
        return self.x.shape[0]

    def add(self, rows: np.ndarray) -> None:
        if rows.shape[0] == 0:
            return
        a, _ = K.layernorm(rows, self.p("attn_norm.gain"), self.p("attn_norm.bias"))
        q, _ = K.linear(a, self.p("attn.wq"), self.p("attn.bq"), tag="layer.proj")
        k, _ = K.linear(a, self.p("attn.wk"), self.p("attn.bk"), tag="layer.proj")
        v, _ = K.linear(a, self.p("attn.wv"), self.p("attn.bv"), tag="layer.proj")
        self.x = np.concatenate([self.x, rows])
        self.q = np.concatenate([self.q, q])
        self.k = np.concatenate([self.k, k])
        self.v = np.concatenate([self.v, v])
        self.avail += rows.shape[0]

    def step(self, closed: bool) -> np.ndarray:
        """Emit every output frame whose window is complete."""
        end = self.avail if closed else max(self.next_out, self.avail - self.right)
        start = self.next_out
        if end <= start:
            return np.empty((0, self.x.shape[1]), self.x.dtype)
        # stored rows cover global frames [base, avail)
        qi = np.arange(start, end)[:, None]
        kj = np.arange(self.base, self.avail)[None, :]
        mask = (kj >= qi - self.left) & (kj <= qi + self.right)
        rows = slice(start - self.base, end - self.base)
        ctx, _ = K.attention(self.q[rows], self.k, self.v, self.enc.cfg.n_heads, mask=mask, tag="layer.attention")
        o, _ = K.linear(ctx, self.p("attn.wo"), self.p("attn.bo"), tag="layer.proj")
        x1 = self.x[rows] + o
        b, _ = K.layernorm(x1, self.p("ffn_norm.gain"), self.p("ffn_norm.bias"))
        u, _ = K.linear(b, self.p("ffn.w1"), self.p("ffn.b1"), tag="layer.ffn")
        f, _ = K.linear(K.gelu(u)[0], self.p("ffn.w2"), self.p("ffn.b2"), tag="layer.ffn")
        self.next_out = end
        if self.left != UNBOUNDED:
            keep_from = max(self.base, end - int(self.left))
            cut = keep_from - self.base
            self.x, self.q, self.k, self.v = self.x[cut:], self.q[cut:], self.k[cut:], self.v[cut:]
            self.base = keep_from
        return x1 + f


@dataclass
class Emission:
    frame: int
    consumed: int  # frontend frames available when the frame was emitted
    flushed: bool  # emitted by close() rather than by a push


class StreamState:
    """One streaming session over a fixed student and window."""

    def __init__(self, student: Student, window: WindowConfig, record_logits: bool = False):
        enc = student.encoder
        if window != enc.cfg.window:
            enc = Encoder(replace(enc.cfg, window=window), enc.params)
        self.student = student
        self.encoder = enc
        self.window = window
        self.unbounded_memory = window.left == UNBOUNDED
        self.frontend = _FrontendStream(enc)
        self.layers = [_LayerStream(enc, n, window) for n in range(enc.cfg.n_layers)]
        self.wf = enc.cfg.wf_enabled
        self.wf_pending = [np.empty((0, enc.cfg.d_model), enc.dtype) for _ in range(enc.cfg.n_layers + 1)]
        self.closed = False
        self.units: list[int] = []
        self.logits: list[np.ndarray] | None = [] if record_logits else None
        self.log: list[Emission] = []
        self.peak_buffered = 0
        self.peak_remainder = 0

    # -- memory accounting ----------------------------------------------------

    @property
    def memory_bound(self) -> float:
        """Transformer-side frame budget: n·(l+r), plus r·(n-k) per layer k when WF is on."""
        n, l, r = len(self.layers), self.window.left, self.window.right
        if l == UNBOUNDED:
            return UNBOUNDED
        extra = sum(r * (n - k) for k in range(n + 1)) if self.wf else 0
        return n * (l + r) + extra

    @property
    def frontend_bound(self) -> int:
        cfg = self.encoder.cfg
        return cfg.frame_stride_samples + sum(k for _, k, _ in cfg.conv_spec) + cfg.pos_conv_kernel

    def buffered_frames(self) -> int:
        n = sum(layer.stored for layer in self.layers)
        if self.wf:
            n += sum(p.shape[0] for p in self.wf_pending)
        return n

    def _account(self) -> None:
        self.peak_buffered = max(self.peak_buffered, self.buffered_frames())
        self.peak_remainder = max(self.peak_remainder, self.frontend.remainder())

    # -- cascade --------------------------------------------------------------

    def _cascade(self, rows: np.ndarray, closed: bool, out: list[int]) -> None:
        new = rows
        for n, layer in enumerate(self.layers):
            if self.wf:
                self.wf_pending[n] = np.concatenate([self.wf_pending[n], new])
            layer.add(new)
            new = layer.step(closed)
        final = new
        m = final.shape[0]
        if self.wf:
            self.wf_pending[-1] = np.concatenate([self.wf_pending[-1], final])
            stack = np.stack([p[:m] for p in self.wf_pending])
            self.wf_pending = [p[m:] for p in self.wf_pending]
            final, _ = K.weighted_sum(stack, self.encoder.v("wf.logits"))
        if m:
            logits, _ = self.student.head_forward(final)
            ids = np.argmax(logits, axis=1)
            first = len(self.units)
            consumed = self.layers[0].avail if self.layers else self.frontend.frames_out
            for j, u in enumerate(ids):
                self.log.append(Emission(first + j, consumed, closed))
            self.units.extend(int(u) for u in ids)
            out.extend(int(u) for u in ids)
            if self.logits is not None:
                self.logits.extend(logits)
        self._account()

    def push(self, chunk) -> np.ndarray:
        if self.closed:
            raise StreamClosedError("push after close")
        chunk = np.asarray(chunk, dtype=self.encoder.dtype).reshape(-1)
        out: list[int] = []
        if chunk.size == 0:
            return np.array(out, dtype=np.int64)
        rows = self.frontend.push(chunk)
        for i in range(rows.shape[0]):
            self._cascade(rows[i:i + 1], False, out)
        self._account()
        return np.array(out, dtype=np.int64)

    def close(self) -> np.ndarray:
        if self.closed:
            raise StreamClosedError("stream already closed")
        self.closed = True
        out: list[int] = []
        # trailing samples short of a full frame are dropped, as offline
        self._cascade(np.empty((0, self.encoder.cfg.d_model), self.encoder.dtype), True, out)
        return np.array(out, dtype=np.int64)

    def measured_latency(self) -> int | None:
        return measured_latency(self.log)


def stream_open(student: Student, window: WindowConfig | None = None, record_logits: bool = False) -> StreamState:
    window = student.cfg.window if window is None else window
    if window.right == UNBOUNDED:
        raise ValueError("a window with unbounded lookahead cannot be streamed")
    return StreamState(student, window, record_logits)


def stream_push(state: StreamState, chunk) -> np.ndarray:
    return state.push(chunk)


def stream_close(state: StreamState) -> np.ndarray:
    return state.close()


def measured_latency(log: list[Emission]) -> int | None:
    """max(consumed - frame) over frames emitted before close; None if there were none."""
    lat = [e.consumed - e.frame for e in log if not e.flushed]
    return max(lat) if lat else None


def stream_units(student: Student, audio: np.ndarray, chunk: int | None = None,
                 window: WindowConfig | None = None) -> np.ndarray:
    """Run a whole utterance through a stream in fixed-size chunks."""
    st = stream_open(student, window)
    step = audio.size if not chunk else chunk
    for pos in range(0, audio.size, max(step, 1)):
        st.push(audio[pos:pos + step])
    st.close()
    return np.array(st.units, dtype=np.int64)
