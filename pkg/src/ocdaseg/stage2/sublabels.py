"""Image-level subdomain labels for stage-II consumption.

Training assigns labels to target_train during stage I; this helper
returns those, and can fill in labels for any other patches by encoding
their style and taking the dominant fuzzy membership under the stage-I
centroids.
"""

import numpy as np

from ocdaseg.clustering import fuzzy_confidence
from ocdaseg.stage1.synthesize import encode_styles


def image_subdomain_labels(model, extra, patches, fuzziness=2.0):
    """dict patch_id -> subdomain id (or -1 when no centroids exist)."""
    labels = {k: int(v) for k, v in extra.get("subdomain_labels", {}).items()}
    missing = [p for p in patches if p.patch_id not in labels]
    if not missing:
        return labels
    centroids = extra.get("centroids")
    if centroids is None:
        for p in missing:
            labels[p.patch_id] = -1
        return labels
    centroids = np.asarray(centroids)
    z = encode_styles(model, missing)
    conf = np.atleast_2d(fuzzy_confidence(z, centroids, m=fuzziness))
    for p, row in zip(missing, conf):
        labels[p.patch_id] = int(np.argmax(row))
    return labels
