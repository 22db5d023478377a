#pragma once

#include <map>
#include <string>
#include <vector>

#include "apt/geometry.hpp"

namespace apt {

struct DatasetSchema {
  int64_t dim = 2;
  int64_t d_a = 2;
  int64_t d_z = 1;
  std::vector<std::string> scalar_names;

  bool operator==(const DatasetSchema&) const = default;
  std::string describe() const;
};

struct Dataset {
  DatasetSchema schema;
  std::vector<PointCloudSample> samples;
  std::map<std::string, std::string> meta;  // file-level key=value metadata

  const std::string& id() const;
  void validate() const;
};

// Per-feature z-score statistics fitted on a training split; time is mapped
// to [0,1] by the largest training snapshot time.
struct NormalizationStats {
  std::vector<double> feat_mean, feat_std;
  std::vector<double> field_mean, field_std;
  std::vector<double> scalar_mean, scalar_std;
  double time_scale = 1.0;
};

// Anchor coordinates (well locations) serialized in sample metadata.
Array2D sample_anchors(const PointCloudSample& sample, int64_t dim);
std::string encode_anchors(const Array2D& anchors);

// Physical domain bounds stored in dataset metadata ("x0,y0,x1,y1"), used to
// build one shared coordinate rescaling for every sample and query set.
RescaleTransform dataset_rescale(const Dataset& ds, double target_extent);

}  // namespace apt
