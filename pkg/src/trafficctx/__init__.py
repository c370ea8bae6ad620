"""Transportation-context augmentation for motion prediction.

Scenes are rendered as ego-centric context maps, paired with a text prompt,
annotated by a vision LLM (or an offline mock), encoded as intention,
affordance and scene-type vectors, and spread from a small annotated split to
the whole dataset by nearest-neighbor propagation.
"""
from .context import ContextVocabulary, EncodedContext, FusionParams, encode_context, fuse, grad_check
from .llm import TransportationContext, format_context, mock_oracle, parse_response
from .propagation import encode_features, nearest_neighbor, propagate, split_dataset
from .render import RenderConfig, render
from .scenario import AgentType, IntentionLabel, Scenario, label_gt_intention, parse_scenario

__version__ = "0.1.0"

__all__ = [
    "AgentType", "ContextVocabulary", "EncodedContext", "FusionParams", "IntentionLabel", "RenderConfig",
    "Scenario", "TransportationContext", "encode_context", "encode_features", "format_context", "fuse",
    "grad_check", "label_gt_intention", "mock_oracle", "nearest_neighbor", "parse_response", "parse_scenario",
    "propagate", "render", "split_dataset",
]
