"""ragforge: build balanced instruction-tuning datasets from structured
documents via retrieval-augmented generation, then judge answer models."""

from .config import ConfigInvalid, PipelineConfig, load_config, validate_config
from .curator import (
    CategorySpec,
    DatasetManifest,
    TrainConfig,
    balance_categories,
    curate,
    emit_train_config,
    exact_dedup,
    export_dataset,
    load_taxonomy,
    near_dedup,
    quality_filter,
)
from .doc_ingest import (
    MalformedXml,
    SchemaViolation,
    Section,
    StructuredDocument,
    TocEntry,
    load_structured,
    parse_tei,
    serialize_structured,
    table_of_contents,
)
from .embed_index import (
    Chunk,
    ChunkPolicy,
    CorpusIndex,
    FlatIndex,
    RetrievalResult,
    VectorRecord,
    chunk_document,
    embed_and_index,
)
from .gateway import (
    ChatTurn,
    Completion,
    CompletionParams,
    EndpointProfile,
    HttpGateway,
    StubGateway,
    prompt_hash,
    stub_gateway,
)
from .judge_harness import (
    EvalReport,
    JudgeRecord,
    aggregate_scores,
    collect_answers,
    run_eval,
    sample_questions,
    score_answer,
)
from .pipeline import PipelineResult, StageFailed, run_pipeline
from .qa_generator import (
    PromptTemplate,
    QAEntry,
    condense_query,
    extract_qa_objects,
    generate_category_batch,
    render_category_prompt,
    retrieve_context,
)

__version__ = "0.1.0"
