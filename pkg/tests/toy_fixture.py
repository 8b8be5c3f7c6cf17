"""Three descriptions of one protagonist for the consistency experiment."""
from itertools import combinations

import numpy as np

PROMPTS = [
    "A young girl in a red cloak walks into the dark forest",
    "The girl in the red cloak meets a grey wolf beneath the trees",
    "The girl in the red cloak runs home across the moonlit field",
]


def mean_pairwise_cosine(feature_maps) -> float:
    flat = [np.asarray(f, dtype=np.float64).ravel() for f in feature_maps]
    sims = [float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))) for a, b in combinations(flat, 2)]
    return sum(sims) / len(sims)
