import numpy as np

from pixot import Domain, FeatureMap, ManifestItem, make_manifest, write_feature_map, write_manifest


def random_map(rng, h, w, d, id="m", domain=Domain.SIM, loc=0.0, scale=1.0):
    return FeatureMap(id, domain, rng.normal(loc, scale, size=(h, w, d)).astype(np.float32))


def dyadic_map(rng, h, w, d, id="m", domain=Domain.SIM):
    """Values on a 2**-8 grid so integer shifts stay exact in float32."""
    vals = rng.integers(-512, 512, size=(h, w, d)) / 256.0
    return FeatureMap(id, domain, vals.astype(np.float32))


def write_maps(maps, directory, manifest_name="manifest.json"):
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for fm in maps:
        path = directory / f"{fm.id}.rfm"
        write_feature_map(fm, path)
        items.append(ManifestItem(fm.id, path, fm.domain))
    manifest = make_manifest(items, validate_files=False)
    write_manifest(manifest, directory / manifest_name)
    return directory / manifest_name


def clustered_full_scale(root, n_real=4066, n_sim=1200, h=16, w=16, d=32, seed=0):
    """Synthetic real/sim stores with one well-separated cluster per sim map.

    Each real map redraws the pixels of a randomly chosen sim map's cluster
    and adds a shared domain offset, so it has one clear nearest neighbour.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 3.0, size=(n_sim, d))
    offset = rng.normal(0.0, 0.25, size=d)
    sims = [
        FeatureMap(f"sim{i:04d}", Domain.SIM, (centers[i] + rng.normal(size=(h, w, d))).astype(np.float32))
        for i in range(n_sim)
    ]
    parents = rng.integers(0, n_sim, size=n_real)
    reals = [
        FeatureMap(
            f"real{i:04d}",
            Domain.REAL,
            (centers[p] + offset + rng.normal(size=(h, w, d))).astype(np.float32),
        )
        for i, p in enumerate(parents)
    ]
    sim_manifest = write_maps(sims, root / "sim", "sim_manifest.json")
    real_manifest = write_maps(reals, root / "real", "real_manifest.json")
    return real_manifest, sim_manifest, parents
