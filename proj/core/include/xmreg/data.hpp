#pragma once

#include <optional>
#include <string>
#include <vector>

#include "xmreg/config.hpp"
#include "xmreg/geometry.hpp"
#include "xmreg/rng.hpp"
#include "xmreg/tensor.hpp"

namespace xmreg::data {

enum class Split { Train, Test };

/// One source/target pair. Pixels live in [-1,1]. The ground-truth corner
/// displacement is only present on evaluation records; training code must
/// go through gt_for_eval(), which refuses to serve train-split records.
struct PairRecord {
    Tensor source; // [1,H,W]
    Tensor target;
    std::string source_path, target_path;
    std::string dataset_tag;
    Split split = Split::Train;
    std::optional<geometry::CornerDisplacement> gt;

    const geometry::CornerDisplacement& gt_for_eval() const;
};

struct Dataset {
    std::string tag;
    bool aligned = true; // aligned full images vs pre-generated unaligned patches
    std::vector<PairRecord> records;

    std::vector<size_t> indices(Split s) const;
};

/// Reads a dataset directory against its manifest. Record order follows the
/// manifest; throws MissingFile / ManifestMismatch.
Dataset ingest(const std::string& dir, const std::string& manifest_file);

/// Co-located patch pair with one side warped by a random homography drawn
/// from [-rho,rho] corner offsets. The returned record carries the exact
/// displacement as evaluation ground truth; patches contain no padding
/// (the window has margin >= rho on all sides, enforced).
PairRecord make_unaligned(const PairRecord& aligned, double rho, int64_t patch, Rng& rng);

/// Bilinear resize with half-pixel-center mapping and edge clamping.
Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w);

/// Applies the per-dataset-tag resize table from the config; images whose
/// tag has no entry pass through unchanged.
Tensor resize_protocol(const Tensor& img, const std::string& tag, const DatasetSection& cfg);

/// Writes the bundled procedural toy dataset: `pairs` aligned cross-modality
/// images (a smooth random field and its inverted/blurred/edge-mixed
/// counterpart) plus a manifest. Deterministic in the seed.
void generate_toy_dataset(const std::string& dir, int pairs, int64_t image_size, uint64_t seed,
                          int train_count = -1);

/// prepare: aligned dataset -> pre-generated unaligned patch dataset.
/// Test records get frozen dp sidecars; train records deliberately do not,
/// so trainer stages can never see the generating transform. Returns the
/// record count (pairs x oversample).
int prepare_unaligned(const std::string& aligned_dir, const std::string& out_dir,
                      const DatasetSection& cfg, uint64_t seed);

/// Plain-text 4x2 sidecar files for corner displacements.
void save_dp_sidecar(const std::string& path, const geometry::CornerDisplacement& dp);
geometry::CornerDisplacement load_dp_sidecar(const std::string& path);

/// Maps [0,1] file pixels into the [-1,1] working range and back.
Tensor to_unit_range(const Tensor& img01);
Tensor from_unit_range(const Tensor& imgpm1);

} // namespace xmreg::data
