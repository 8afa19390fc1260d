"""Crowdsourced lung-nodule annotation pipeline.

CT volumes are segmented into lung quadrants, rendered as overlapping
thin-slab maximum-intensity-projection video segments, seeded with a
quality-control sprite, served as annotation tasks, and finally scored
against expert ground truth with stratified sensitivity reports.
"""

__version__ = "0.1.0"
