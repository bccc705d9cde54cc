"""Multi-agent pipeline that compares Polymarket trader signals with GDELT
media coverage, plus the harness used to evaluate it."""

from .model import (
    Alert,
    Cluster,
    ClusterSet,
    GroundTruthLabel,
    InsightRecord,
    KeywordBundle,
    WhaleProfile,
)

__version__ = "0.1.0"

__all__ = [
    "Alert",
    "Cluster",
    "ClusterSet",
    "GroundTruthLabel",
    "InsightRecord",
    "KeywordBundle",
    "WhaleProfile",
]
