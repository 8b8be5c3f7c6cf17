"""Synthetic score sequences with hand-traced termination.

Rule: stop at stage k (k >= window + 1) once the running best rose by less
than epsilon across the last ``window`` stages, i.e.
max(s[:k]) - max(s[:k-window+1]) < eps. Window 3, eps 0.005, 8 stages
unless noted. ``best`` is the 0-based index of the first maximum.
"""

CASES = [
    # k=4: .612-.6=.012; k=5: .613-.61=.003 -> plateau
    {"name": "worked-example", "scores": [0.5, 0.6, 0.61, 0.612, 0.613],
     "stage": 5, "reason": "plateau", "best": 4},
    # best rises 0.2 across every window
    {"name": "monotone", "scores": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
     "stage": 8, "reason": "max_iterations", "best": 7},
    # flat from the start: earliest legal plateau is stage 4
    {"name": "immediate-plateau", "scores": [0.5] * 8,
     "stage": 4, "reason": "plateau", "best": 0},
    # k=4: max .5 vs max(s[:2]) .5 -> plateau
    {"name": "oscillating-flat", "scores": [0.5, 0.3, 0.5, 0.3, 0.5, 0.3, 0.5, 0.3],
     "stage": 4, "reason": "plateau", "best": 0},
    # every window contains a new peak 0.1 higher
    {"name": "oscillating-rising", "scores": [0.2, 0.5, 0.1, 0.6, 0.1, 0.7, 0.1, 0.8],
     "stage": 8, "reason": "max_iterations", "best": 7},
    # best stays at stage 1
    {"name": "declining", "scores": [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2],
     "stage": 4, "reason": "plateau", "best": 0},
    # k=6: .501-.4; k=7: .502-.5=.002 -> plateau
    {"name": "late-plateau", "scores": [0.1, 0.2, 0.3, 0.4, 0.5, 0.501, 0.502, 0.503],
     "stage": 7, "reason": "plateau", "best": 6},
    # k=5: .706-.7=.006 (no); k=6: .7065-.703=.0035 -> plateau
    {"name": "near-epsilon", "scores": [0.5, 0.6, 0.7, 0.703, 0.706, 0.7065, 0.707, 0.7072],
     "stage": 6, "reason": "plateau", "best": 5},
    # +0.004 per stage: best grows .008 per window -> never in best mode
    {"name": "slow-climb-best", "scores": [0.1, 0.104, 0.108, 0.112, 0.116, 0.12, 0.124, 0.128],
     "stage": 8, "reason": "max_iterations", "best": 7},
    # same climb in previous mode: deltas .004, .004 at k=4 -> plateau
    {"name": "slow-climb-previous", "scores": [0.1, 0.104, 0.108, 0.112, 0.116, 0.12, 0.124, 0.128],
     "stage": 4, "reason": "plateau", "best": 3, "mode": "previous"},
]
