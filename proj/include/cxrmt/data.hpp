#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cxrmt/error.hpp"
#include "cxrmt/image.hpp"

namespace cxrmt {

inline constexpr std::size_t kSpatialClasses = 9;

// Coarse location classes, label m is index m-1.
inline constexpr std::array<const char*, kSpatialClasses> kSpatialRegions = {
    "Left lobe", "Right lobe", "Lower part", "Lower-middle part", "Middle part",
    "Upper-middle part", "Upper part", "Diffused", "Multiple"};

struct DatasetInfo {
  std::string id;
  std::vector<std::string> classes;
  bool has_spatial = false;
};

// Combined label vocabulary: dataset i owns a contiguous block of classes.
struct Taxonomy {
  std::vector<DatasetInfo> datasets;

  std::size_t num_classes() const {
    std::size_t n = 0;
    for (const auto& d : datasets) n += d.classes.size();
    return n;
  }

  std::size_t offset(std::size_t dataset) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < dataset; ++i) n += datasets[i].classes.size();
    return n;
  }

  std::optional<std::size_t> find(const std::string& id) const {
    for (std::size_t i = 0; i < datasets.size(); ++i)
      if (datasets[i].id == id) return i;
    return std::nullopt;
  }

  std::size_t index_of(const std::string& id) const {
    auto i = find(id);
    if (!i) throw ConfigError("unknown dataset id '" + id + "'");
    return *i;
  }

  // "B:Nodule" style names, in class order.
  std::vector<std::string> qualified_names() const {
    std::vector<std::string> out;
    for (const auto& d : datasets)
      for (const auto& c : d.classes) out.push_back(d.id + ":" + c);
    return out;
  }

  std::vector<std::uint8_t> mask_for(std::size_t dataset) const {
    std::vector<std::uint8_t> m(num_classes(), 0);
    const std::size_t off = offset(dataset);
    for (std::size_t i = 0; i < datasets[dataset].classes.size(); ++i) m[off + i] = 1;
    return m;
  }

  bool operator==(const Taxonomy& o) const {
    if (datasets.size() != o.datasets.size()) return false;
    for (std::size_t i = 0; i < datasets.size(); ++i)
      if (datasets[i].id != o.datasets[i].id || datasets[i].classes != o.datasets[i].classes ||
          datasets[i].has_spatial != o.datasets[i].has_spatial)
        return false;
    return true;
  }
};

inline bool operator==(const DatasetInfo& a, const DatasetInfo& b) {
  return a.id == b.id && a.classes == b.classes && a.has_spatial == b.has_spatial;
}

// 14 ChestX-ray14-like classes (A) followed by 12 PLCO-like classes (B).
inline Taxonomy default_taxonomy() {
  return {{{"A",
            {"Atelectasis", "Cardiomegaly", "Effusion", "Infiltration", "Mass", "Nodule", "Pneumonia",
             "Pneumothorax", "Consolidation", "Edema", "Emphysema", "Fibrosis", "Pleural_Thickening",
             "Hernia"},
            false},
           {"B",
            {"Nodule", "Mass", "Granuloma", "Infiltrate", "Scarring", "Fibrosis", "Bone_Soft_Tissue_Lesion",
             "Cardiac_Abnormality", "COPD", "Effusion", "Atelectasis", "Hilar_Abnormality"},
            true}}};
}

// Supervision for one image. Entries outside dataset_mask, spatial labels
// when !spatial_active and masks when !seg_active carry no meaning.
struct LabelRecord {
  std::vector<std::uint8_t> abnormal;      // D
  std::vector<std::uint8_t> dataset_mask;  // D
  std::vector<std::uint8_t> spatial;       // F
  bool spatial_active = false;
  std::vector<std::uint8_t> seg;           // 2 x N x N; channel 0 lungs, channel 1 heart
  bool seg_active = false;

  bool operator==(const LabelRecord&) const = default;
};

struct LabeledSample {
  std::string image_id;
  std::string image_path;
  std::string patient_id;
  std::string dataset_id;
  std::string mask_path;
  LabelRecord labels;
  Image image;
};

}  // namespace cxrmt
