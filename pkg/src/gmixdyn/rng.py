"""Counter-based random streams.

Every consumer of randomness gets its own generator, keyed by a tuple
(master seed, stream, replication, atom, component).  Re-running a
replication at different (sigma, z) settings therefore reuses identical
noise (common random numbers), and replications can run in any order or
in parallel without affecting results.
"""

import numpy as np

# Stream ids: disjoint namespaces so e.g. the psi and phi' pipelines can
# never share atoms even when fed the same replication index.
STREAM_DATA = 0
STREAM_MEANS = 1
STREAM_ALTERNATIVE = 2
STREAM_PERTURBED = 3
STREAM_DMF = 4
STREAM_REFINE = 5
STREAM_MISC = 6

# Atom names in the surrogate processes, in a fixed documented order.
ATOM_IDS = {
    "G": 0,
    "H": 1,
    "W": 2,
    "Gamma": 3,
    "U": 4,
    "V": 5,
    "Xtilde": 6,
    "latents": 7,
    "noise": 8,
    "paths": 9,
    "g_e": 10,
    "g_o": 11,
    "h_e": 12,
    "H_pool": 13,
    "G_pool": 14,
}


def stream(master_seed, stream_id, rep=0, atom="noise", component=0):
    """Independent generator for one (stream, replication, atom, component)."""
    key = (int(stream_id), int(rep), ATOM_IDS[atom], int(component))
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def fast_stream(master_seed, stream_id, rep=0, atom="noise", component=0):
    """Same keying, SFC64 bit generator (≈2x faster for bulk float32 draws)."""
    key = (int(stream_id), int(rep), ATOM_IDS[atom], int(component))
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.SFC64(ss))
