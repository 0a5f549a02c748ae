from .parse import clean_prompt, noun_phrase, parse_prompt
from .rules import RuleParseProvider
from .spacy_provider import SpacyParseProvider
from .types import EntityGroup, ParsedPrompt, ParsedWord, ParseProvider, TokenSpan

__all__ = [
    "EntityGroup",
    "ParsedPrompt",
    "ParsedWord",
    "ParseProvider",
    "RuleParseProvider",
    "SpacyParseProvider",
    "TokenSpan",
    "clean_prompt",
    "noun_phrase",
    "parse_prompt",
]
