"""Graph message-passing classifier over an episode.

Every image in an N-way K-shot episode becomes a node. Node features are
the backbone embedding concatenated with a label block: a one-hot vector
for support nodes, the uniform vector 1/N for query nodes. A learned,
row-stochastic adjacency propagates label information from labeled to
unlabeled nodes over a fixed number of rounds, and the query's final label
belief yields its class logits.

The label block is handled symmetrically in every learned transform
(pairwise scores see only the L1 distance between label blocks; label
beliefs mix through scalars shared across classes; the readout is the
general class-symmetric linear map). This makes query logits exactly
equivariant under permutations of the class identities, and makes the
parameter shapes independent of N, so one trained model evaluates at any
way count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ContractError, DimensionError
from .layers import Layer, Linear

LEAKY_SLOPE = 0.01


# ---------------------------------------------------------------------------
# episodes

@dataclass
class Episode:
    """One N-way K-shot task: class-grouped support images then queries.

    Labels are episode-local ints in [0, N). ``query_labels`` is the hidden
    ground truth, present for training and scoring.
    """

    support_images: np.ndarray  # [N*K, 1, 28, 28]
    support_labels: np.ndarray  # [N*K]
    query_images: np.ndarray    # [Q, 1, 28, 28]
    query_labels: np.ndarray    # [Q]
    n_way: int
    k_shot: int

    def __post_init__(self):
        self.support_labels = np.asarray(self.support_labels, dtype=np.int64)
        self.query_labels = np.asarray(self.query_labels, dtype=np.int64)
        n, k = self.n_way, self.k_shot
        if self.support_images.shape[0] != n * k:
            raise ContractError(
                f"episode: {self.support_images.shape[0]} support images for {n}-way {k}-shot")
        if self.support_labels.shape[0] != n * k:
            raise ContractError("episode: support label count mismatch")
        counts = np.bincount(self.support_labels, minlength=n)
        if len(counts) != n or not np.all(counts == k):
            raise ContractError(f"episode: expected exactly {k} supports per class, got {counts}")
        if self.query_images.shape[0] != self.query_labels.shape[0]:
            raise ContractError("episode: query label count mismatch")
        if self.query_labels.size and (self.query_labels.min() < 0 or self.query_labels.max() >= n):
            raise ContractError("episode: query label out of range")

    @property
    def n_query(self):
        return self.query_images.shape[0]


@dataclass
class GraphState:
    """Per-round snapshot: node features and the learned adjacency."""

    node_features: Tensor  # [V, d]
    adjacency: Tensor      # [V, V], rows sum to 1


# ---------------------------------------------------------------------------
# node features

def label_block(support_labels, n_way, n_query):
    """[V, N] label array: one-hot rows for support, uniform 1/N for query."""
    support_labels = np.asarray(support_labels, dtype=np.int64)
    if support_labels.size and (support_labels.min() < 0 or support_labels.max() >= n_way):
        raise ContractError("support label out of range")
    block = np.full((support_labels.shape[0] + n_query, n_way), 1.0 / n_way)
    block[np.arange(support_labels.shape[0]), :] = 0.0
    block[np.arange(support_labels.shape[0]), support_labels] = 1.0
    return block


def build_node_features(embeddings, support_labels, n_way, k_shot=None):
    """Concatenate embeddings with the label block: [V, emb_dim + N].

    Rows must be ordered support first, then queries.
    """
    support_labels = np.asarray(support_labels, dtype=np.int64)
    if k_shot is not None and support_labels.shape[0] != n_way * k_shot:
        raise ContractError(
            f"{support_labels.shape[0]} support labels for {n_way}-way {k_shot}-shot")
    v = embeddings.shape[0]
    n_query = v - support_labels.shape[0]
    if n_query < 0:
        raise ContractError("more support labels than embedding rows")
    block = Tensor(label_block(support_labels, n_way, n_query))
    return ag.concat([embeddings, block], axis=1)


# ---------------------------------------------------------------------------
# adjacency learning

class PairScorer(Layer):
    """2-layer MLP scoring a node pair from the elementwise |difference|
    of their features.

    With ``pool_labels=True`` the trailing label columns enter only through
    their summed absolute difference, one class-symmetric scalar, so scores
    are invariant under class relabeling. Without it the scorer is a plain
    d -> d -> 1 MLP on the full |f_i - f_j|.
    """

    def __init__(self, name, content_dims, rng, pool_labels=False):
        super().__init__()
        self.content_dims = content_dims
        self.pool_labels = pool_labels
        din = content_dims + (1 if pool_labels else 0)
        self.lin1 = Linear(f"{name}.lin1", din, din, rng)
        self.lin2 = Linear(f"{name}.lin2", din, 1, rng)

    def forward(self, pair_features):
        hidden = ag.leaky_relu(self.lin1(pair_features), LEAKY_SLOPE)
        return self.lin2(hidden)


def pairwise_abs_diff(features):
    """[V,d] -> [V,V,d] tensor of |f_i - f_j|."""
    v, d = features.shape
    fi = ag.reshape(features, (v, 1, d))
    fj = ag.reshape(features, (1, v, d))
    return ag.abs_(ag.sub(fi, fj))


def learn_adjacency(features, scorer, label_dims=0):
    """Row-stochastic adjacency from pairwise feature differences.

    ``label_dims`` is the number of trailing label columns in ``features``;
    a label-pooling scorer reduces them to one symmetric scalar. Raw scores
    are symmetric by construction (|f_i - f_j| = |f_j - f_i|); each row is
    then normalized independently with a softmax.
    """
    v, d = features.shape
    if v < 2:
        raise ContractError(f"adjacency needs at least 2 nodes, got {v}")
    dc = scorer.content_dims
    if dc + label_dims != d:
        raise DimensionError(
            f"scorer built for {dc} content + {label_dims} label dims, features have {d}")
    if scorer.pool_labels != (label_dims > 0):
        raise ContractError("scorer label pooling does not match label_dims")
    diff = pairwise_abs_diff(features)
    if label_dims:
        content = ag.narrow(diff, 2, 0, dc)
        labels = ag.sum_(ag.narrow(diff, 2, dc, label_dims), axis=2, keepdims=True)
        pair = ag.concat([content, labels], axis=2)
    else:
        pair = diff
    scores = scorer(ag.reshape(pair, (v * v, pair.shape[2])))
    return ag.softmax(ag.reshape(scores, (v, v)), axis=1)


def graph_conv(features, adjacency, w_id, w_adj):
    """One message-passing step over the operator family {identity, A}:
    leaky_relu(F W_id + (A F) W_adj)."""
    own = ag.matmul(features, w_id)
    mixed = ag.matmul(ag.matmul(adjacency, features), w_adj)
    return ag.leaky_relu(ag.add(own, mixed), LEAKY_SLOPE)


# ---------------------------------------------------------------------------
# the classifier

class GnnClassifier(Layer):
    """Stacked rounds of (learn adjacency -> belief mix), with a content
    ``graph_conv`` between consecutive rounds and a class-symmetric readout
    of the query beliefs.

    Per round, with fresh parameters: the adjacency is re-learned from the
    current content features and beliefs; beliefs update as
    theta_self * b + theta_msg * (A b). Content updates through
    ``graph_conv`` after every round but the last (the final round's
    content would feed no later adjacency, so a conv there would be
    unreachable by gradients). Readout: logits = s * b_q + r * rowsum(b_q)
    + t, the general map that commutes with class permutations.
    """

    def __init__(self, name, rng, embed_dim=64, hidden=48, rounds=2):
        super().__init__()
        if rounds < 1:
            raise ContractError(f"need at least 1 round, got {rounds}")
        self.embed_dim, self.hidden, self.rounds = embed_dim, hidden, rounds
        self.scorers = []
        self.w_id = []
        self.w_adj = []
        self.theta_self = []
        self.theta_msg = []
        din = embed_dim
        for r in range(1, rounds + 1):
            self.scorers.append(
                PairScorer(f"{name}.round{r}.scorer", din, rng, pool_labels=True))
            # belief mixing starts as the identity so an untrained model
            # leaves query beliefs uniform (exactly chance behavior)
            self.theta_self.append(Parameter(np.ones(1), f"{name}.round{r}.theta_self"))
            self.theta_msg.append(Parameter(np.zeros(1), f"{name}.round{r}.theta_msg"))
            if r < rounds:
                bound = np.sqrt(1.0 / din)
                self.w_id.append(Parameter(
                    rng.uniform(-bound, bound, size=(din, hidden)), f"{name}.round{r}.w_id"))
                self.w_adj.append(Parameter(
                    rng.uniform(-bound, bound, size=(din, hidden)), f"{name}.round{r}.w_adj"))
                din = hidden
        self.out_scale = Parameter(np.ones(1), f"{name}.out.scale")
        self.out_cross = Parameter(np.zeros(1), f"{name}.out.cross")
        self.out_bias = Parameter(np.zeros(1), f"{name}.out.bias")

    def forward(self, embeddings, support_labels, n_way, trace=None):
        """Logits [Q, N] for the trailing Q = V - len(support_labels) rows.

        ``trace``, if a list, receives one ``GraphState`` per round.
        """
        support_labels = np.asarray(support_labels, dtype=np.int64)
        v = embeddings.shape[0]
        n_support = support_labels.shape[0]
        n_query = v - n_support
        if n_query < 1:
            raise ContractError("episode graph has no query node")
        content = embeddings
        beliefs = Tensor(label_block(support_labels, n_way, n_query))

        for r in range(self.rounds):
            features = ag.concat([content, beliefs], axis=1)
            adjacency = learn_adjacency(features, self.scorers[r], label_dims=n_way)
            if trace is not None:
                trace.append(GraphState(features, adjacency))
            beliefs = ag.add(ag.mul(beliefs, self.theta_self[r]),
                             ag.mul(ag.matmul(adjacency, beliefs), self.theta_msg[r]))
            if r < self.rounds - 1:
                content = graph_conv(content, adjacency, self.w_id[r], self.w_adj[r])

        b_q = ag.narrow(beliefs, 0, n_support, n_query)
        total = ag.sum_(b_q, axis=1, keepdims=True)
        return ag.add(ag.add(ag.mul(b_q, self.out_scale), ag.mul(total, self.out_cross)),
                      self.out_bias)

    def forward_many(self, embeddings, support_labels, n_way):
        """Batched variant: ``embeddings`` [E,V,dim], ``support_labels``
        [E,S] -> logits [E*Q, N]. Episodes stay independent; this only
        fuses the arithmetic across them."""
        e, v, _ = embeddings.shape
        support_labels = np.asarray(support_labels, dtype=np.int64)
        n_support = support_labels.shape[1]
        n_query = v - n_support
        if n_query < 1:
            raise ContractError("episode graph has no query node")
        blocks = np.stack([label_block(row, n_way, n_query) for row in support_labels])
        content = embeddings
        beliefs = Tensor(blocks)

        for r in range(self.rounds):
            dc = content.shape[2]
            features = ag.concat([content, beliefs], axis=2)
            fi = ag.reshape(features, (e, v, 1, dc + n_way))
            fj = ag.reshape(features, (e, 1, v, dc + n_way))
            diff = ag.abs_(ag.sub(fi, fj))
            pair = ag.concat([
                ag.narrow(diff, 3, 0, dc),
                ag.sum_(ag.narrow(diff, 3, dc, n_way), axis=3, keepdims=True),
            ], axis=3)
            scores = self.scorers[r](ag.reshape(pair, (e * v * v, dc + 1)))
            adjacency = ag.softmax(ag.reshape(scores, (e, v, v)), axis=2)
            beliefs = ag.add(ag.mul(beliefs, self.theta_self[r]),
                             ag.mul(ag.matmul(adjacency, beliefs), self.theta_msg[r]))
            if r < self.rounds - 1:
                own = ag.matmul(ag.reshape(content, (e * v, dc)), self.w_id[r])
                mixed = ag.matmul(
                    ag.reshape(ag.matmul(adjacency, content), (e * v, dc)), self.w_adj[r])
                content = ag.reshape(
                    ag.leaky_relu(ag.add(own, mixed), LEAKY_SLOPE), (e, v, self.hidden))

        b_q = ag.narrow(beliefs, 1, n_support, n_query)
        total = ag.sum_(b_q, axis=2, keepdims=True)
        logits = ag.add(ag.add(ag.mul(b_q, self.out_scale), ag.mul(total, self.out_cross)),
                        self.out_bias)
        return ag.reshape(logits, (e * n_query, n_way))


def episode_loss(logits, query_labels):
    """Mean softmax cross-entropy over the episode's queries."""
    return ag.cross_entropy(logits, query_labels)


class FewshotClassifier(Layer):
    """Shared backbone + graph classifier, applied to whole episodes.

    Queries are classified independently: with Q > 1, each query forms its
    own (support + query) graph so queries never influence one another.
    """

    def __init__(self, backbone, gnn):
        super().__init__()
        self.backbone = backbone
        self.gnn = gnn

    def forward(self, episode, trace=None):
        images = np.concatenate([episode.support_images, episode.query_images])
        emb = self.backbone(Tensor(images))
        s = episode.support_images.shape[0]
        q = episode.n_query
        if q == 1:
            return self.gnn(emb, episode.support_labels, episode.n_way, trace=trace)
        support = ag.narrow(emb, 0, 0, s)
        rows = []
        for i in range(q):
            one = ag.concat([support, ag.narrow(emb, 0, s + i, 1)], axis=0)
            rows.append(self.gnn(one, episode.support_labels, episode.n_way, trace=trace))
        return ag.concat(rows, axis=0)

    def forward_many(self, episodes):
        """Fused forward over same-shape episodes (one backbone call).

        Returns (logits [sum(Q), N], concatenated query labels). For the
        batchnorm-carrying backbone, train-mode statistics are computed
        over the whole fused batch.
        """
        first = episodes[0]
        n, k, q = first.n_way, first.k_shot, first.n_query
        for ep in episodes[1:]:
            if (ep.n_way, ep.k_shot, ep.n_query) != (n, k, q):
                raise ContractError("forward_many needs episodes of identical shape")
        if q != 1:
            raise ContractError("forward_many supports single-query episodes")
        v = n * k + q
        images = np.concatenate(
            [np.concatenate([ep.support_images, ep.query_images]) for ep in episodes])
        emb = self.backbone(Tensor(images))
        emb3 = ag.reshape(emb, (len(episodes), v, emb.shape[1]))
        labels = np.stack([ep.support_labels for ep in episodes])
        logits = self.gnn.forward_many(emb3, labels, n)
        query_labels = np.concatenate([ep.query_labels for ep in episodes])
        return logits, query_labels

    def predict(self, episode):
        with ag.no_grad():
            logits = self.forward(episode)
        return logits.data.argmax(axis=1)
