from .analysis import (
    AnalysisReport,
    additivity_report,
    cosine,
    coupling_conditionings,
    coupling_report,
    entropy_report,
    pca_2d,
    word_vector,
)
from .benchmark import (
    TEMPLATE,
    BenchmarkPrompt,
    Rubric,
    build_benchmark,
    build_rubric_prompt,
    default_pairs,
    load_rubric,
    validate_rubric,
)
from .scoring import (
    Detection,
    HttpDetectorClient,
    HttpRubricScorer,
    ScoreRecord,
    ScoringItem,
    detscore,
    parse_score,
    score_images,
    vqa_questions,
    vqa_score,
)

__all__ = [
    "TEMPLATE",
    "AnalysisReport",
    "BenchmarkPrompt",
    "Detection",
    "HttpDetectorClient",
    "HttpRubricScorer",
    "Rubric",
    "ScoreRecord",
    "ScoringItem",
    "additivity_report",
    "build_benchmark",
    "build_rubric_prompt",
    "cosine",
    "coupling_conditionings",
    "coupling_report",
    "default_pairs",
    "detscore",
    "entropy_report",
    "load_rubric",
    "parse_score",
    "pca_2d",
    "score_images",
    "validate_rubric",
    "vqa_questions",
    "vqa_score",
    "word_vector",
]
