"""Pre-trainable session recommender backends.

The graph backend runs a gated propagation step over the session graph's
normalized in/out adjacency and reads the node states out with last-item
keyed soft attention. A recurrent graph-free backend reuses the same
parameter shapes for the portability variant. Either one supplies the item
and session embeddings consumed by the hybrid encoder.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError, TrainingError
from .graph import build_graph
from .optim import AdamWState

MAX_LAYERS = 10


class SbrParameters:
    """Embedding table plus propagation, gate, and readout weights.

    All tensors are initialized uniform(-1/sqrt(d1), 1/sqrt(d1)).
    """

    def __init__(self, num_items, d1=64, layers=1, rng=None, dtype=np.float32):
        if layers < 0 or layers > MAX_LAYERS:
            raise TrainingError(f"propagation layers must be in [0, {MAX_LAYERS}], got {layers}")
        self.num_items = num_items
        self.d1 = d1
        self.layers = layers
        bound = 1.0 / np.sqrt(d1)

        def init(*shape):
            if rng is None:
                data = np.zeros(shape)
            else:
                data = rng.uniform(-bound, bound, size=shape)
            return ad.tensor(data, dtype=dtype, requires_grad=True)

        self.item_embeddings = init(num_items, d1)
        self.agg = [
            {"w_out": init(d1, d1), "w_in": init(d1, d1), "bias": init(2 * d1)}
            for _ in range(max(layers, 1))
        ]
        self.gate = {
            "reset_w": init(3 * d1, d1),
            "reset_b": init(d1),
            "update_w": init(3 * d1, d1),
            "update_b": init(d1),
            "cand_w": init(3 * d1, d1),
            "cand_b": init(d1),
        }
        self.readout_q = init(d1)
        self.readout_w1 = init(d1, d1)
        self.readout_w2 = init(d1, d1)
        self.readout_c = init(d1)
        self.combine_w3 = init(d1, 2 * d1)

    def named_tensors(self):
        named = {"sbr.item_embeddings": self.item_embeddings}
        for l, layer in enumerate(self.agg):
            for key, t in layer.items():
                named[f"sbr.layer{l}.{key}"] = t
        for key, t in self.gate.items():
            named[f"sbr.gate.{key}"] = t
        named["sbr.readout.q"] = self.readout_q
        named["sbr.readout.w1"] = self.readout_w1
        named["sbr.readout.w2"] = self.readout_w2
        named["sbr.readout.c"] = self.readout_c
        named["sbr.combine.w3"] = self.combine_w3
        return named

    def tensors(self):
        return list(self.named_tensors().values())

    def load_named(self, arrays):
        for name, t in self.named_tensors().items():
            if name not in arrays:
                raise DataError(f"checkpoint is missing {name}")
            t.data[...] = arrays[name].astype(t.data.dtype)


@dataclass
class GraphBatch:
    node_idx: np.ndarray  # (B, u) item indices, zero-padded
    mask: np.ndarray  # (B, u, 1) 1.0 on real node slots
    a_out: np.ndarray  # (B, u, u)
    a_in: np.ndarray  # (B, u, u)
    last: np.ndarray  # (B,) node slot of the final sequence position

    @property
    def size(self):
        return self.node_idx.shape[0]


def batch_graphs(graphs, dtype=np.float32):
    u = max(g.num_nodes for g in graphs)
    b = len(graphs)
    node_idx = np.zeros((b, u), dtype=np.int64)
    mask = np.zeros((b, u, 1), dtype=dtype)
    a_out = np.zeros((b, u, u), dtype=dtype)
    a_in = np.zeros((b, u, u), dtype=dtype)
    last = np.zeros(b, dtype=np.int64)
    for i, g in enumerate(graphs):
        k = g.num_nodes
        node_idx[i, :k] = g.nodes
        mask[i, :k, 0] = 1.0
        a_out[i, :k, :k] = g.a_out
        a_in[i, :k, :k] = g.a_in
        last[i] = g.last_slot
    return GraphBatch(node_idx, mask, a_out, a_in, last)


def _gate_combine(params, message, state):
    """GRU-style update; message is 2*d1 wide, state d1."""
    gate = params.gate
    gin = ad.concat([message, state], axis=-1)
    update = ad.sigmoid(ad.add(ad.matmul(gin, gate["update_w"]), gate["update_b"]))
    reset = ad.sigmoid(ad.add(ad.matmul(gin, gate["reset_w"]), gate["reset_b"]))
    cin = ad.concat([message, ad.mul(reset, state)], axis=-1)
    cand = ad.tanh(ad.add(ad.matmul(cin, gate["cand_w"]), gate["cand_b"]))
    # state + update * (cand - state) == (1 - update) * state + update * cand
    return ad.add(state, ad.mul(update, ad.add(cand, ad.scale(state, -1.0))))


def propagate_batch(batch, params, layers=None):
    """Node states (B, u, d1) after the gated propagation layers."""
    layers = params.layers if layers is None else layers
    if layers < 0 or layers > MAX_LAYERS:
        raise TrainingError(f"propagation layers must be in [0, {MAX_LAYERS}], got {layers}")
    dtype = params.item_embeddings.data.dtype
    states = ad.embedding_lookup(params.item_embeddings, batch.node_idx)
    a_out = ad.constant(batch.a_out.astype(dtype, copy=False))
    a_in = ad.constant(batch.a_in.astype(dtype, copy=False))
    for l in range(layers):
        agg = params.agg[min(l, len(params.agg) - 1)]
        msg_out = ad.matmul(a_out, ad.matmul(states, agg["w_out"]))
        msg_in = ad.matmul(a_in, ad.matmul(states, agg["w_in"]))
        message = ad.add(ad.concat([msg_out, msg_in], axis=-1), agg["bias"])
        states = _gate_combine(params, message, states)
    return states


def readout_batch(states, batch, params):
    """Session embeddings (B, d1): attention over nodes keyed by the last item."""
    b, u, d1 = states.data.shape
    x_last = ad.gather_rows(states, batch.last)
    keyed = ad.matmul(x_last, params.readout_w1)
    ones = ad.constant(np.ones((b, u, 1), dtype=states.data.dtype))
    keyed_rows = ad.matmul(ones, ad.reshape(keyed, (b, 1, d1)))
    pre = ad.add(ad.add(ad.matmul(states, params.readout_w2), keyed_rows), params.readout_c)
    alpha = ad.matmul(ad.sigmoid(pre), ad.reshape(params.readout_q, (d1, 1)))
    alpha = ad.mul(alpha, ad.constant(batch.mask.astype(states.data.dtype, copy=False)))
    weighted = ad.matmul(ad.transpose(alpha), states)
    global_vec = ad.reshape(weighted, (b, d1))
    combined = ad.concat([global_vec, x_last], axis=-1)
    return ad.matmul(combined, ad.transpose(params.combine_w3))


def propagate(graph, params, layers=None):
    """Single-graph node states (u, d1)."""
    batch = batch_graphs([graph])
    states = propagate_batch(batch, params, layers=layers)
    return ad.reshape(states, states.data.shape[1:])


def readout(states, graph, params):
    """Single-graph session embedding (d1,)."""
    u, d1 = states.data.shape
    batch = batch_graphs([graph])
    z = readout_batch(ad.reshape(states, (1, u, d1)), batch, params)
    return ad.reshape(z, (d1,))


def score_items(z, params):
    """Inner-product logits against every item embedding."""
    single = z.data.ndim == 1
    if single:
        z = ad.reshape(z, (1, z.data.shape[0]))
    logits = ad.matmul(z, ad.transpose(params.item_embeddings))
    if single:
        logits = ad.reshape(logits, (params.num_items,))
    return logits


def encode_sequence_graphfree(session, params):
    """Gated-recurrent session embedding; final hidden state, no graph."""
    if not len(session):
        raise DataError("cannot encode an empty session")
    z = encode_sequences_graphfree([list(session)], params)
    return ad.reshape(z, (params.d1,))


def encode_sequences_graphfree(sessions, params):
    """Batched recurrent encoding of item-index sequences -> (B, d1).

    The layer-0 aggregation weights double as input projections so the
    recurrence reuses the gate parameter shapes unchanged.
    """
    b = len(sessions)
    length = max(len(s) for s in sessions)
    dtype = params.item_embeddings.data.dtype
    idx = np.zeros((b, length), dtype=np.int64)
    step_mask = np.zeros((b, length), dtype=dtype)
    for i, s in enumerate(sessions):
        idx[i, : len(s)] = s
        step_mask[i, : len(s)] = 1.0
    agg = params.agg[0]
    state = ad.constant(np.zeros((b, params.d1), dtype=dtype))
    for t in range(length):
        emb = ad.embedding_lookup(params.item_embeddings, idx[:, t])
        message = ad.add(
            ad.concat([ad.matmul(emb, agg["w_out"]), ad.matmul(emb, agg["w_in"])], axis=-1),
            agg["bias"],
        )
        new_state = _gate_combine(params, message, state)
        m = ad.constant(np.repeat(step_mask[:, t : t + 1], params.d1, axis=1))
        state = ad.add(state, ad.mul(m, ad.add(new_state, ad.scale(state, -1.0))))
    return state


def session_embeddings(sessions, params, graph_free=False):
    """Session embeddings (B, d1) via the configured backend."""
    if graph_free:
        return encode_sequences_graphfree(sessions, params)
    batch = batch_graphs([build_graph(s) for s in sessions])
    return readout_batch(propagate_batch(batch, params), batch, params)


def full_ranking_ranks(params, examples, graph_free=False, batch_size=512):
    """Forward-only rank of each target among all items (1-based).

    Ties count as ranked above (strictly-greater comparison only); used for
    pretraining early stop and backend sanity metrics.
    """
    ranks = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        z = session_embeddings([list(ex.prefix) for ex in chunk], params, graph_free)
        scores = score_items(z, params).data
        for row, ex in zip(scores, chunk):
            ranks.append(1 + int(np.sum(row > row[ex.target])))
    return np.asarray(ranks, dtype=np.int64)


def pretrain(
    data,
    rng,
    d1=64,
    layers=1,
    batch_size=1024,
    lr=1e-3,
    weight_decay=0.0,
    dropout=0.3,
    epochs=30,
    patience=5,
    graph_free=False,
    log_lines=None,
):
    """Train a backend on next-item cross entropy with early stopping.

    Early stop tracks validation MRR@10 under full ranking; the best
    parameters are restored before returning. NaN loss aborts with the last
    epoch's parameters restored.
    """
    params = SbrParameters(data.num_items, d1=d1, layers=layers, rng=rng.child("init"))
    if epochs == 0:
        return params
    if not data.train:
        raise DataError("no training examples")
    opt = AdamWState(params.tensors(), lr=lr, weight_decay=weight_decay)
    best = {"mrr": -1.0, "arrays": _copy_tensors(params), "epoch": -1}
    last_good = _copy_tensors(params)
    m = data.num_items
    for epoch in range(epochs):
        order = rng.child(f"epoch{epoch}").permutation(len(data.train))
        total_loss = 0.0
        steps = 0
        for start in range(0, len(order), batch_size):
            chunk = [data.train[i] for i in order[start : start + batch_size]]
            with ad.Tape() as tape:
                z = session_embeddings([list(ex.prefix) for ex in chunk], params, graph_free)
                if dropout > 0.0:
                    z = ad.dropout(z, dropout, rng.child(f"drop{epoch}/{start}"))
                logits = score_items(z, params)
                probs = ad.softmax(logits)
                onehot = np.zeros((len(chunk), m), dtype=np.float32)
                onehot[np.arange(len(chunk)), [ex.target for ex in chunk]] = 1.0
                ce = ad.mul(ad.constant(onehot), ad.log(probs, floor=1e-12))
                loss = ad.scale(ad.sum_(ce), -1.0 / len(chunk))
            if not np.isfinite(loss.data):
                _restore_tensors(params, last_good)
                raise TrainingError(f"pretraining loss diverged at epoch {epoch}")
            opt.step(tape.backward(loss))
            total_loss += float(loss.data)
            steps += 1
        last_good = _copy_tensors(params)
        val_ranks = full_ranking_ranks(params, data.validation, graph_free)
        mrr10 = float(np.mean(np.where(val_ranks <= 10, 1.0 / val_ranks, 0.0)))
        if log_lines is not None:
            log_lines.append(
                f"pretrain epoch {epoch} loss {total_loss / steps:.6f} val_mrr10 {mrr10:.6f}"
            )
        if mrr10 > best["mrr"]:
            best = {"mrr": mrr10, "arrays": _copy_tensors(params), "epoch": epoch}
        elif epoch - best["epoch"] >= patience:
            break
    _restore_tensors(params, best["arrays"])
    return params


def _copy_tensors(params):
    return {name: t.data.copy() for name, t in params.named_tensors().items()}


def _restore_tensors(params, arrays):
    for name, t in params.named_tensors().items():
        t.data[...] = arrays[name]
