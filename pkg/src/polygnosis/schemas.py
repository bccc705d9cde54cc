"""JSON Schemas for the structured agent responses.

These are deliberately loose about label spelling (labels are normalised by
the typed parsers afterwards) but strict about shape, so a repair round-trip
is triggered only for structurally unusable replies.
"""

_label = {"type": "string", "minLength": 1}
_nullable_label = {"type": ["string", "null"]}

CLUSTERING = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["cluster_id", "alerts"],
        "properties": {
            "cluster_id": {"type": "string", "minLength": 1},
            "theme": {"type": "string"},
            "alerts": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["index"],
                    "properties": {
                        "index": {"type": "integer"},
                        "direction": {"type": "string"},
                    },
                },
            },
        },
    },
}

KEYWORDS = {
    "type": "object",
    "required": ["actor_pairs", "gkg_keywords"],
    "properties": {
        "actor_pairs": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "items": {"type": "string"}},
        },
        "gkg_keywords": {"type": "array", "minItems": 1, "items": {"type": "string"}},
    },
}

REFLECTION = {
    "type": "object",
    "required": ["satisfied"],
    "properties": {
        "satisfied": {"type": "boolean"},
        "actions": {"type": "array", "items": {"type": "object"}},
        "comments": {"type": "string"},
        "search_queries": {"type": "array", "items": {"type": "string"}},
    },
}

_record_properties = {
    "poly_direction": _label,
    "whale_quality": _label,
    "media_direction": _label,
    "poly_media_alignment": _label,
    "poly_comment": {"type": "string"},
    "media_comment": {"type": "string"},
    "alignment_comment": {"type": "string"},
    "importance_score": {"type": ["integer", "number", "string"]},
    "importance_reason": {"type": "string"},
}

ANALYSIS = {
    "type": "object",
    "required": [
        "poly_direction",
        "whale_quality",
        "media_direction",
        "poly_media_alignment",
        "importance_score",
    ],
    "properties": _record_properties,
}

GLOBAL = {
    "type": "object",
    "required": ["clusters"],
    "properties": {
        "clusters": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["cluster_id"] + ANALYSIS["required"],
                "properties": {"cluster_id": {"type": "string"}, **_record_properties},
            },
        }
    },
}

VERDICT = {
    "type": "object",
    "required": ["flagged_clusters"],
    "properties": {
        "flagged_clusters": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["cluster_id"],
                "properties": {
                    "cluster_id": {"type": "string"},
                    "feedback": {"type": "string"},
                    "suggested_changes": {
                        "type": ["object", "null"],
                        "additionalProperties": _nullable_label,
                    },
                },
            },
        }
    },
}
