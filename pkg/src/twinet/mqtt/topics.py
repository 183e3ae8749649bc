"""Topic filter validation and wildcard matching.

Standard MQTT semantics: '+' matches exactly one level, '#' matches zero or
more trailing levels and must be the final level of a filter.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import BadTopicError, FilterError


@dataclass(frozen=True)
class TopicFilter:
    levels: tuple[str, ...]

    def __str__(self) -> str:
        return "/".join(self.levels)


def validate_filter(filter_text: str) -> TopicFilter:
    """Parse a filter string, rejecting misplaced wildcards."""
    if not filter_text:
        raise FilterError("filter must be non-empty")
    levels = tuple(filter_text.split("/"))
    for i, level in enumerate(levels):
        if "#" in level:
            if level != "#":
                raise FilterError(f"'#' must occupy a whole level: {filter_text!r}")
            if i != len(levels) - 1:
                raise FilterError(f"'#' must be the final level: {filter_text!r}")
        elif "+" in level and level != "+":
            raise FilterError(f"'+' must occupy a whole level: {filter_text!r}")
    return TopicFilter(levels)


def validate_topic(topic: str) -> tuple[str, ...]:
    """Split a wildcard-free topic name into levels."""
    if not topic:
        raise BadTopicError("topic must be non-empty")
    if "+" in topic or "#" in topic:
        raise BadTopicError(f"topic may not contain wildcards: {topic!r}")
    return tuple(topic.split("/"))


def topic_matches(topic_filter: TopicFilter, topic: str) -> bool:
    """True iff the wildcard-free ``topic`` matches ``topic_filter``."""
    levels = validate_topic(topic)
    for i, flevel in enumerate(topic_filter.levels):
        if flevel == "#":
            return True
        if i >= len(levels):
            return False
        if flevel != "+" and flevel != levels[i]:
            return False
    return len(levels) == len(topic_filter.levels)
