"""Non-isotropy regularization for proxy-based deep metric learning."""
from .embedding import (EmbeddingBatch, ProxySet, VmfConfig, cosine_similarity_matrix,
                        l2_normalize, vmf_posterior)
from .flow import (ConditionalFlow, CouplingBlock, FlowConfig, coupling_forward,
                   coupling_inverse, flow_forward, flow_grad, flow_inverse,
                   sample_residual)
from .losses import (LossValueWithGrads, ProxyAnchorParams, proxy_anchor, proxy_nca,
                     proxy_nca_pp, proxy_nca_star)
from .metrics import (MetricsReport, concentration_variance, evaluate, map_at_1000, nmi,
                      pi_density, recall_at_k, spectral_decay, uniformity_g2)
from .nir import (NirConfig, combined_objective, generate_synthetic, nir_loss,
                  nir_negative_pair_term, self_reg_loss)
from .synthetic import SyntheticSpec, make_benchmark, sample_vmf
from .trainer import TrainConfig, adam_step, grad_check, sample_batch, train

__version__ = "0.1.0"
