# Turning embeddings into layered semantic IDs
#
# Four quantizers share one interface: fit a codebook on an embedding
# matrix, then assign codes to any item, seen or new.

import numpy as np

from semid.quantizers import assign, fit, recon_error, reconstruct
from semid.synth import SynthConfig, generate, purity, two_genre_instance

data = generate(SynthConfig(n_users=10, n_items=400, n_genres=8, dim=16, noise=0.4))
X = data.textual

# Reconstruction error after each layer. RQ and PSRQ never get worse as
# layers are added; PQ reports one entry per segment.
for method in ("VQ", "PQ", "RQ", "PSRQ"):
    cb = fit(method, X, k=16, l=3, seed=0, M=4)
    errs = recon_error(X, cb)
    print(f"{method:5s} layer dims {cb.layer_dims}  mse per layer", np.round(errs, 4))

# The codes of the first layer already group items by genre.
cb = fit("PSRQ", X, k=8, l=3, seed=0)
table = assign(X, cb)
print("layer-1 genre purity:", round(purity(table.codes[:, 0], data.genres), 3))
print("first items:", table.as_dict()[0], table.as_dict()[1])

# reconstruct() rebuilds vectors from codes (the first d coordinates of
# each PSRQ centroid after layer 1).
rec = reconstruct(table, cb)
print("mean squared error from codes:", round(float(((X.values - rec) ** 2).sum(1).mean()), 4))

# Why condition on the prefix: two genres far apart on x, each split into
# two sub-groups on y. After one layer the residuals of both genres look
# alike, so plain residual clustering groups the second layer by sub-group.
# Clustering [residual, prefix] keeps the genres apart.
pts, genre = two_genre_instance()
for method in ("RQ", "PSRQ"):
    codes = assign(pts, fit(method, pts, k=2, l=2, seed=0)).codes
    print(f"{method:5s} layer-2 genre purity {purity(codes[:, 1], genre):.2f}")
