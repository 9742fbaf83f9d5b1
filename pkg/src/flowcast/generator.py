"""Next-packet language model: a small causal transformer over packet lines.

The model is trained on two-line windows (current packet line, next packet
line) so one packet of context is always enough at prediction time; the last
line of each flow is paired with a doubled end-of-flow marker instead, which
is how the model learns both to emit the marker and to stay stopped on it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bpe import (
    FLOW_END_ID, NUM_SPECIALS, PAD_ID, BpeVocab, decode_bytes, encode,
)
from .errors import ConfigError, SequenceTooLong
from .nn import (
    Adam, EarlyStopper, LayerNorm, Tensor, TransformerBlock, cross_entropy,
    embed, glorot, load_checkpoint, save_checkpoint, softmax, zeros,
)

FLOW_END_SIGNAL = "<FLOW_END>"


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int = 1024
    layers: int = 4
    width: int = 128
    heads: int = 4
    max_positions: int = 256
    dropout: float = 0.1
    lr: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class NextPacketModel:
    def __init__(self, config: GeneratorConfig):
        if config.width % config.heads:
            raise ConfigError("width must be divisible by heads")
        self.config = config
        rng = np.random.default_rng(config.seed)
        w = config.width
        self.w_e = glorot(rng, config.vocab_size, w)
        self.w_p = glorot(rng, config.max_positions, w)
        self.blocks = [
            TransformerBlock(w, config.heads, rng, causal=True,
                             drop_rate=config.dropout)
            for _ in range(config.layers)
        ]
        self.ln_f = LayerNorm(w)
        self.w_lm = glorot(rng, w, config.vocab_size)
        self.b_lm = zeros(config.vocab_size)

    def params(self) -> dict[str, Tensor]:
        out = {"w_e": self.w_e, "w_p": self.w_p,
               "w_lm": self.w_lm, "b_lm": self.b_lm}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"blocks.{i}"))
        out.update(self.ln_f.params("ln_f"))
        return out

    def load_params(self, params: dict[str, Tensor]) -> None:
        own = self.params()
        if set(own) != set(params):
            raise ConfigError("parameter names do not match this architecture")
        for name, p in own.items():
            if p.data.shape != params[name].data.shape:
                raise ConfigError(f"shape mismatch for {name}")
            p.data[...] = params[name].data

    def forward(self, ids: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] > self.config.max_positions:
            raise SequenceTooLong(
                f"{ids.shape[1]} tokens exceed {self.config.max_positions} positions")
        h = embed(ids, self.w_e, self.w_p)
        for block in self.blocks:
            h = block(h, train=train, rng=rng)
        return self.ln_f(h) @ self.w_lm + self.b_lm

    def loss(self, ids: np.ndarray, train: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
        """Shifted next-token cross entropy; padding positions do not count."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        logits = self.forward(ids[:, :-1], train=train, rng=rng)
        b, t, v = logits.shape
        targets = ids[:, 1:].reshape(-1)
        return cross_entropy(logits.reshape(b * t, v), targets,
                             ignore_mask=targets == PAD_ID)

    def next_distribution(self, ids) -> np.ndarray:
        """Probabilities over the vocabulary for the position after ids."""
        logits = self.forward(np.asarray(ids, dtype=np.int64))
        return softmax(logits).data[0, -1]


def build_windows(flow_lines_list: list[list[str]], vocab: BpeVocab,
                  max_positions: int) -> list[list[int]]:
    """Training windows from whole flows.

    One window per adjacent line pair, "line_i\\nline_{i+1}\\n"; the final
    line instead gets the end marker twice so the stopped state is absorbing.
    """
    windows = []
    for lines in flow_lines_list:
        for i, line in enumerate(lines):
            if i + 1 < len(lines):
                ids = encode(line + "\n" + lines[i + 1] + "\n", vocab).ids
            else:
                ids = encode(line + "\n", vocab).ids + [FLOW_END_ID, FLOW_END_ID]
            if len(ids) > max_positions:
                raise SequenceTooLong(
                    f"window of {len(ids)} tokens exceeds {max_positions}")
            windows.append(ids)
    return windows


def pad_batch(windows: list[list[int]]) -> np.ndarray:
    width = max(len(w) for w in windows)
    out = np.full((len(windows), width), PAD_ID, dtype=np.int64)
    for i, w in enumerate(windows):
        out[i, :len(w)] = w
    return out


def _epoch_loss(model: NextPacketModel, windows: list[list[int]],
                batch_size: int) -> float:
    """Token-weighted mean loss without dropout or updates."""
    total, count = 0.0, 0
    for start in range(0, len(windows), batch_size):
        batch = windows[start:start + batch_size]
        ids = pad_batch(batch)
        n = int((ids[:, 1:] != PAD_ID).sum())
        total += model.loss(ids).item() * n
        count += n
    return total / max(count, 1)


def train_generator(train_windows: list[list[int]], config: GeneratorConfig,
                    val_windows: list[list[int]] | None = None,
                    log=None) -> tuple[NextPacketModel, dict]:
    if not train_windows:
        raise ConfigError("no training windows")
    model = NextPacketModel(config)
    params = model.params()
    opt = Adam(params, lr=config.lr)
    stopper = EarlyStopper(params, config.patience)
    rng = np.random.default_rng(config.seed + 1)
    monitor = val_windows if val_windows else train_windows
    history = {"train_loss": [], "val_loss": [], "epochs": 0, "best_epoch": -1}

    order = np.arange(len(train_windows))
    for epoch in range(1, config.max_epochs + 1):
        rng.shuffle(order)
        t0 = time.monotonic()
        for start in range(0, len(order), config.batch_size):
            batch = [train_windows[i] for i in order[start:start + config.batch_size]]
            opt.zero_grad()
            loss = model.loss(pad_batch(batch), train=True, rng=rng)
            loss.backward()
            opt.step()
        train_loss = _epoch_loss(model, train_windows, config.batch_size)
        val_loss = _epoch_loss(model, monitor, config.batch_size)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        history["epochs"] = epoch
        if log:
            log(f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} "
                f"({time.monotonic() - t0:.1f}s)")
        if stopper.update(epoch, val_loss):
            break
    stopper.restore_best()
    history["best_epoch"] = stopper.best_epoch
    history["best_val_loss"] = stopper.best_loss
    return model, history


@dataclass(frozen=True)
class GenerationPolicy:
    mode: str = "greedy"            # "greedy" or "temperature"
    temperature: float = 1.0
    max_tokens: int = 64
    seed: int = 0


@dataclass
class Prediction:
    """Outcome of one next-packet query."""
    kind: str                       # "line", "flow_end", or "rejected"
    line: str | None = None
    reason: str | None = None
    tokens: list = field(default_factory=list)


def predict_next_packet(model: NextPacketModel, vocab: BpeVocab, line: str,
                        policy: GenerationPolicy = GenerationPolicy()) -> Prediction:
    """Continue a packet line until a newline, an end marker, or a limit."""
    if policy.mode not in ("greedy", "temperature"):
        raise ConfigError(f"unknown generation mode {policy.mode!r}")
    rng = np.random.default_rng(policy.seed)
    prompt = encode(line + "\n", vocab).ids
    generated: list[int] = []
    while True:
        if len(prompt) + len(generated) >= model.config.max_positions:
            return Prediction("rejected", reason="position overflow",
                              tokens=generated)
        if len(generated) >= policy.max_tokens:
            return Prediction("rejected", reason="token budget exhausted",
                              tokens=generated)
        probs = model.next_distribution(prompt + generated)
        if policy.mode == "greedy":
            token = int(np.argmax(probs))
        else:
            if policy.temperature <= 0:
                raise ConfigError("temperature must be positive")
            logp = np.log(np.maximum(probs, 1e-300)) / policy.temperature
            logp -= logp.max()
            scaled = np.exp(logp)
            token = int(rng.choice(len(scaled), p=scaled / scaled.sum()))
        if token == FLOW_END_ID:
            return Prediction("flow_end", tokens=generated)
        if token < NUM_SPECIALS:
            return Prediction("rejected", reason="stray marker token",
                              tokens=generated)
        generated.append(token)
        raw = decode_bytes(generated, vocab)
        if b"\n" in raw:
            text = raw.split(b"\n", 1)[0]
            try:
                return Prediction("line", line=text.decode(), tokens=generated)
            except UnicodeDecodeError:
                return Prediction("rejected", reason="undecodable bytes",
                                  tokens=generated)


def evaluate_generator(model: NextPacketModel, vocab: BpeVocab,
                       flow_lines_list: list[list[str]],
                       policy: GenerationPolicy = GenerationPolicy()) -> dict:
    """Exact-match next-line accuracy plus end-of-flow behavior.

    next_line_accuracy covers non-final packets only; next_event_accuracy
    additionally requires the end marker after each final packet.
    """
    line_hits = line_total = 0
    end_hits = end_total = 0
    for lines in flow_lines_list:
        for i, line in enumerate(lines):
            pred = predict_next_packet(model, vocab, line, policy)
            if i + 1 < len(lines):
                line_total += 1
                line_hits += pred.kind == "line" and pred.line == lines[i + 1]
            else:
                end_total += 1
                end_hits += pred.kind == "flow_end"
    return {
        "next_line_accuracy": line_hits / max(line_total, 1),
        "flow_end_accuracy": end_hits / max(end_total, 1),
        "next_event_accuracy": (line_hits + end_hits) / max(line_total + end_total, 1),
        "lines": line_total,
        "flow_ends": end_total,
    }


def save_generator(path, model: NextPacketModel, *, optimizer_state=None,
                   extra=None) -> None:
    save_checkpoint(path, model.params(), model.config.to_dict(),
                    optimizer_state=optimizer_state,
                    rng_seed=model.config.seed, extra=extra)


def load_generator(path, expected_config: GeneratorConfig | None = None
                   ) -> NextPacketModel:
    expected = expected_config.to_dict() if expected_config else None
    ckpt = load_checkpoint(path, expected_config=expected)
    model = NextPacketModel(GeneratorConfig(**ckpt.config))
    model.load_params(ckpt.params)
    return model
