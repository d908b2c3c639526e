# %% [markdown]
# # Learning features that make inliers look alike
#
# A short training run on small scenes. Afterwards, pairs of inliers should
# have clearly higher feature similarity than any other pair.

# %%
import numpy as np

from dscreg.bench import SceneSpec, generate_scene
from dscreg.consistency import feature_similarity_matrix
from dscreg.embed import EmbedConfig, EmbeddingNetwork, TrainConfig, forward, train

scenes = [generate_scene(SceneSpec(n_corrs=100, outlier_ratio=0.7, seed=10_000 + i)) for i in range(400)]
net = EmbeddingNetwork.init(EmbedConfig(num_blocks=3, feature_dim=32), seed=0)
print(net.num_parameters(), "parameters")

# %%
result = train(net, scenes, TrainConfig(steps=300, batch=4, seed=0))
losses = np.array(result.losses)
print("loss, first 20 steps: %.3f   last 20 steps: %.3f" % (losses[:20].mean(), losses[-20:].mean()))
print("learned sigma_f: %.3f" % result.net.sigma_f)

# %% [markdown]
# Check on scenes the network has not seen.

# %%
def similarity_gap(model, scene):
    feats, conf = forward(model, scene.corrs, 0.10)
    gamma, _ = feature_similarity_matrix(feats, model.sigma_f)
    lab = scene.corrs.labels
    off = ~np.eye(len(lab), dtype=bool)
    both = np.outer(lab, lab) & off
    return gamma[both].mean() - gamma[~both & off].mean(), conf[lab].mean(), conf[~lab].mean()


held_out = [generate_scene(SceneSpec(n_corrs=100, outlier_ratio=0.7, seed=900 + i)) for i in range(5)]
for s in held_out:
    gap, c_in, c_out = similarity_gap(result.net, s)
    print("gap %.3f   confidence inliers %.3f / outliers %.3f" % (gap, c_in, c_out))
