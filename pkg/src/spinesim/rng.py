"""Deterministic stream derivation.

Every simulation consumes randomness through one of two routes:

* replica streams: ``Philox`` seeded by ``SeedSequence((master, tag, index))``.
  The tag separates purposes (tree sampling, population runs, resampling, ...)
  so suites never share a stream even under the same master seed.

* node streams: a counter-based ``Philox`` generator keyed by a 128-bit
  blake2b digest of (replica context, node label). A node's draws therefore
  do not depend on the order in which the tree is traversed or on which
  worker owns the replica, which is what makes resampled subtrees and
  multi-worker runs bit-reproducible.

Aggregation across replicas must stay permutation invariant; helpers here
hand out work in fixed-size chunks so callers can merge per-chunk results in
chunk order regardless of worker count.
"""

import hashlib

import numpy as np

TAG_TREE = 1
TAG_SPINE = 3
TAG_RESAMPLE = 5
TAG_LAPLACE = 7
TAG_MOTION = 11
TAG_POPULATION = 17

CHUNK = 256


def replica_stream(master_seed, tag, index):
    """Independent generator for replica ``index`` of purpose ``tag``."""
    seq = np.random.SeedSequence((int(master_seed), int(tag), int(index)))
    return np.random.Generator(np.random.Philox(seq))


def replica_context(master_seed, tag, index, resample=0):
    """Stable byte string identifying one replica (and resampling round)."""
    return b"%d|%d|%d|%d" % (int(master_seed), int(tag), int(index), int(resample))


def label_bytes(label):
    """Serialize an ancestry label (tuple of child indices) canonically."""
    arr = np.asarray(label, dtype=np.uint64)
    return len(label).to_bytes(4, "little") + arr.tobytes()


def node_generator(context, label):
    """Counter-based generator owned by a single tree node.

    ``context`` comes from :func:`replica_context`; ``label`` is the node's
    ancestry tuple. Equal inputs give identical draw sequences on every
    platform and under any traversal order.
    """
    digest = hashlib.blake2b(context + b"#" + label_bytes(label), digest_size=16)
    key = np.frombuffer(digest.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def named_generator(context, name):
    """Counter-based generator for a named stream within one replica.

    Used for streams that are not tied to a tree node, like the spine's
    motion and event clocks, which must not share draws with any node.
    """
    digest = hashlib.blake2b(context + b"!" + name, digest_size=16)
    key = np.frombuffer(digest.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class NodeStreams:
    """Hands out the per-node and named generators of a single replica.

    Every generator is derived from the replica context by hashing, so draws
    for one node never depend on what other nodes consumed. `with_round`
    yields a sibling family for subtree resampling: same replica, fresh
    independent draws for every node.
    """

    __slots__ = ("context",)

    def __init__(self, context):
        self.context = context

    def node(self, label):
        return node_generator(self.context, label)

    def named(self, name):
        return named_generator(self.context, name)

    def with_round(self, i):
        return NodeStreams(self.context + b"@%d" % int(i))


def tree_streams(master_seed, tag, index, resample=0):
    """NodeStreams for replica ``index`` of purpose ``tag``."""
    return NodeStreams(replica_context(master_seed, tag, index, resample))


def chunk_ranges(n, chunk=CHUNK):
    """Half-open index ranges covering ``range(n)`` in fixed-size chunks."""
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
