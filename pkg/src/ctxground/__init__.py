"""Context-enhanced region-word grounding at desk scale."""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    AdjNounStats,
    CorpusError,
    TaggedCaption,
    Token,
    Vocabulary,
    build_vocabulary,
    compute_adj_noun_stats,
    extract_adjectives,
    extract_phrases,
    filter_adjectives_by_category,
    load_corpus,
    remove_context,
)
from .negatives import (  # noqa: F401
    NegativeSample,
    build_negative_batch,
    gen_adj_negative,
    gen_noun_negative,
    gen_random_adj_negative,
)
from .encoders import (  # noqa: F401
    ClassEmbedding,
    EncoderStack,
    SceneGrid,
    apply_gradients,
    build_class_embeddings,
    embed_caption_context_free,
    embed_caption_contextualized,
    embed_regions,
    load_checkpoint,
    load_scenes,
    save_checkpoint,
)
from .alignment import (  # noqa: F401
    BatchLoss,
    GroundingResult,
    TrainConfig,
    attention,
    batch_backward,
    batch_forward,
    grounding_score,
    loss_caption_side,
    loss_image_side,
    pretrain,
)
from .evaluation import (  # noqa: F401
    Box,
    RetrievalQuery,
    attribute_probe,
    classify_regions,
    ground_word,
    iou,
    phrase_grounding_ap,
    retrieval_eval,
)
from .synthetic import SyntheticSpec, generate_synthetic  # noqa: F401
from .estimator import RegionWordAligner  # noqa: F401
