from .dataset import (DatasetManifest, TokenSplit, build_manifest, dataset_stats, format_stats,
                      read_codebook, read_manifest, read_split, write_codebook, write_split)
from .dct import DctGrid, dct_decode, dct_embeddings, dct_tokenize
from .packing import (HEADER_BYTES, bits_per_token, body_bytes, pack_codebook, pack_labels,
                      pack_tokens, packed_size, unpack_codebook, unpack_labels, unpack_tokens)
from .tokenizer import (PatchTokenizer, Tokenizer, decode_tokens, fit_toy_codebook,
                        tokenize_image, tokenize_images)
from .vq import Codebook, TokenGrid, lookup, quantize
