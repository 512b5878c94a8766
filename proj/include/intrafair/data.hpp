#pragma once

#include "intrafair/types.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace intrafair {

enum class ColumnKind { continuous, one_hot, protected_attr };

/// Tabular dataset with binary labels and a binary protected attribute.
///
/// The protected attribute is exposed twice: as `groups` and, unless it was
/// dropped at load time, as one of the feature columns (`protected_column`).
struct DataSet {
    Matrix features;
    BinaryVector labels;
    BinaryVector groups;
    std::vector<std::string> feature_names;
    std::vector<ColumnKind> column_kinds;
    std::optional<std::size_t> protected_column;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

    /// Checks shapes and that labels/groups are binary. Throws ShapeError / ValidationError.
    void validate() const;

    /// Rows in the given order.
    DataSet subset(std::span<const std::size_t> rows) const;

    /// FNV-1a over the raw bytes of every field; used as a cache key.
    std::uint64_t content_hash() const;
};

bool operator==(const DataSet& a, const DataSet& b);

struct SplitSpec {
    std::array<double, 3> fractions{0.6, 0.2, 0.2};
    Seed seed = 0;
};

/// Per-column affine map fitted on the training split.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> scale;

    static Standardizer fit(const DataSet& train);
    void apply(DataSet& ds) const;
};

struct Splits {
    DataSet train;
    DataSet valid;
    DataSet test;
    Standardizer standardizer;
};

/// Seeded shuffle into train/valid/test, then standardizes continuous columns
/// with train statistics. Each split must contain both groups and both classes.
Splits split_standardize(const DataSet& ds, const SplitSpec& spec);

/// Column roles for `load_csv`. Read from a JSON file with the same field names.
struct CsvSchema {
    std::string label_column;
    std::map<std::string, int> label_map;  // empty: values must already be "0"/"1"
    std::string protected_column;
    std::map<std::string, int> protected_map;
    std::vector<std::string> categorical_columns;
    std::vector<std::string> drop_columns;
    bool keep_protected_feature = true;

    static CsvSchema from_file(const std::filesystem::path& path);
    static CsvSchema from_json_text(const std::string& text);
};

/// Reads a comma-separated file with a header row. Categorical columns are
/// one-hot encoded over the categories observed in the whole file.
DataSet load_csv(const std::filesystem::path& path, const CsvSchema& schema);

/// Canonical dump: feature columns followed by `__label__` and `__protected__`.
/// One-hot columns are recognised on reload by a `name=value` header.
void save_dump(const DataSet& ds, const std::filesystem::path& path);
DataSet load_dump(const std::filesystem::path& path);

/// Synthetic data with a controlled gap in positive-label rate between groups.
struct SyntheticSpec {
    std::size_t n = 20000;
    std::size_t d = 8;  // including the protected column
    double target_spd = 0.3;
    double group0_fraction = 0.7;
    double label_noise = 0.05;
    double signal = 0.4;       // mean shift of informative features per unit label
    double group_shift = 0.5;  // mean shift of group-cluster features between groups
    Seed seed = 0;
};

DataSet generate_synthetic(const SyntheticSpec& spec);

}  // namespace intrafair
