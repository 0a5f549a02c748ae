from __future__ import annotations

from .types import ParsedWord


class SpacyParseProvider:
    """Parse provider backed by a spaCy pipeline.

    The pipeline is loaded lazily; pass ``nlp`` to reuse an existing one. spaCy
    pipelines are not guaranteed thread-safe, so share one provider per thread.
    """

    name = "spacy"

    def __init__(self, model: str = "en_core_web_trf", nlp=None):
        self.model = model
        self._nlp = nlp

    @property
    def nlp(self):
        if self._nlp is None:
            import spacy

            self._nlp = spacy.load(self.model)
        return self._nlp

    @property
    def version(self) -> str:
        meta = getattr(self.nlp, "meta", {}) or {}
        return f"{meta.get('name', self.model)}-{meta.get('version', '?')}"

    def parse(self, text: str) -> list[ParsedWord]:
        return [
            ParsedWord(
                index=t.i,
                text=t.text,
                start=t.idx,
                end=t.idx + len(t.text),
                pos=t.pos_,
                dep=t.dep_,
                head=t.head.i,
            )
            for t in self.nlp(text)
            if not t.is_space
        ]
