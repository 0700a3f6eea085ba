# %% [markdown]
# Parameter budgets of the two generative models at foundation-model width
# (d = 768 embeddings, K = 11 classes, default hidden sizes).

# %%
from fedcvae.evaluation import param_count
from fedcvae.models import CganParams, CvaeParams
from fedcvae.numerics import RngStream

d, K = 768, 11
cvae = CvaeParams.init(d, K, RngStream(0, 1), RngStream(0, 2))
cgan = CganParams.init(d, K, RngStream(0, 1), RngStream(0, 2))

# %%
print("CVAE encoder", cvae.encoder.widths, cvae.encoder.param_count())
print("CVAE decoder", cvae.decoder.widths, cvae.decoder.param_count())
print("CGAN generator", cgan.generator.widths, cgan.generator.param_count())
print("CGAN discriminator", cgan.discriminator.widths, cgan.discriminator.param_count())
print(f"\ntotal CVAE {param_count(cvae):,}  CGAN {param_count(cgan):,}  ratio {param_count(cgan) / param_count(cvae):.2f}")

# %% only the shared half travels each round
print(f"per-round upload: decoder {cvae.decoder.param_count():,} vs generator {cgan.generator.param_count():,} floats")
