"""No-reference video quality assessment pipeline.

Modules:
    media      -- Y4M / PNG-directory ingest into RGB frame sequences
    fdf        -- frame difference fragmentation (residuals, top-K mosaics)
    prompts    -- metadata-driven quality prompts for the caption generator
    store      -- CVQF embedding format, captions and dataset manifests
    fusion     -- segment planning, pooling, multimodal concatenation
    regressor  -- MLP quality regressor with precision+ranking loss
    evaluate   -- SRCC/PLCC/KRCC metrics and the repeated-split protocol
    cli        -- batch driver (fragment / fuse / train / predict / eval)
"""

__version__ = "0.1.0"
