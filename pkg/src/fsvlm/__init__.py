"""Few-shot adaptation benchmark harness for dual-encoder vision-language
models on fine-grained glomerular patch classification.

Subpackages / modules:

- ``corpus``       patch extraction, prompts, dataset manifests
- ``sampler``      deterministic nested shot planning with WSI separation
- ``encoder``      backbone abstraction, embedding batches, prompt classification
- ``toy``          bundled small dual encoder for desk-scale experiments
- ``adapt``        four adaptation strategies + the few-shot training loop
- ``metrics``      accuracy / macro-F1 / macro-AUC / ROC
- ``projection``   deterministic neighbor-graph 2D projection
- ``diagnostics``  cross-modal embedding analysis and density figures
- ``runner``       grid orchestration, record store, aggregation
- ``report``       tables and figures
- ``cli``          the ``fsvlm`` command line entry point
"""

__version__ = "0.1.0"
