#include "intrafair/data.hpp"

#include "intrafair/error.hpp"
#include "intrafair/rng.hpp"
#include "intrafair/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace intrafair {

namespace {

constexpr const char* kLabelColumn = "__label__";
constexpr const char* kProtectedColumn = "__protected__";

void check_binary(const BinaryVector& v, const char* what) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] != 0 && v[i] != 1) {
            throw ValidationError(std::string(what) + " must be 0/1, found " + std::to_string(v[i]) +
                                  " at row " + std::to_string(i));
        }
    }
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else if (c != '\r') {
            field.push_back(c);
        }
    }
    out.push_back(std::move(field));
    return out;
}

std::string trim(std::string s) {
    auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

std::optional<double> parse_double(const std::string& s) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) return std::nullopt;
    return v;
}

namespace {

int map_binary(const std::string& raw, const std::map<std::string, int>& mapping, const std::string& column,
               std::size_t row) {
    if (!mapping.empty()) {
        auto it = mapping.find(raw);
        if (it == mapping.end()) {
            throw ValidationError("column '" + column + "': value '" + raw + "' at row " + std::to_string(row) +
                                  " has no binary mapping");
        }
        if (it->second != 0 && it->second != 1) {
            throw ValidationError("column '" + column + "': mapping for '" + raw + "' is not 0/1");
        }
        return it->second;
    }
    if (raw == "0") return 0;
    if (raw == "1") return 1;
    throw ValidationError("column '" + column + "': non-binary value '" + raw + "' at row " + std::to_string(row));
}

}  // namespace

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

void DataSet::validate() const {
    const auto n = labels.size();
    if (groups.size() != n || static_cast<std::size_t>(features.rows()) != n) {
        throw ShapeError("dataset: features/labels/groups lengths disagree");
    }
    if (feature_names.size() != dim() || column_kinds.size() != dim()) {
        throw ShapeError("dataset: feature names/kinds do not match column count");
    }
    if (protected_column && *protected_column >= dim()) {
        throw ShapeError("dataset: protected column index out of range");
    }
    check_binary(labels, "labels");
    check_binary(groups, "protected attribute");
}

DataSet DataSet::subset(std::span<const std::size_t> rows) const {
    DataSet out;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    out.labels.reserve(rows.size());
    out.groups.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
        out.labels.push_back(labels[rows[i]]);
        out.groups.push_back(groups[rows[i]]);
    }
    out.feature_names = feature_names;
    out.column_kinds = column_kinds;
    out.protected_column = protected_column;
    return out;
}

std::uint64_t DataSet::content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a(h, features.data(), sizeof(double) * static_cast<std::size_t>(features.size()));
    h = fnv1a(h, labels.data(), sizeof(int) * labels.size());
    h = fnv1a(h, groups.data(), sizeof(int) * groups.size());
    for (const auto& name : feature_names) h = fnv1a(h, name.data(), name.size() + 1);
    return h;
}

bool operator==(const DataSet& a, const DataSet& b) {
    return a.features.rows() == b.features.rows() && a.features.cols() == b.features.cols() &&
           a.features == b.features && a.labels == b.labels && a.groups == b.groups &&
           a.feature_names == b.feature_names && a.column_kinds == b.column_kinds &&
           a.protected_column == b.protected_column;
}

// ---------------------------------------------------------------------------
// Standardization and splitting

Standardizer Standardizer::fit(const DataSet& train) {
    Standardizer s;
    const auto d = train.dim();
    s.mean.assign(d, 0.0);
    s.scale.assign(d, 1.0);
    const double n = static_cast<double>(train.size());
    for (std::size_t j = 0; j < d; ++j) {
        if (train.column_kinds[j] != ColumnKind::continuous) continue;
        const auto col = train.features.col(static_cast<Eigen::Index>(j));
        const double mu = col.sum() / n;
        const double var = (col.array() - mu).square().sum() / n;
        s.mean[j] = mu;
        // Constant columns keep scale 1.
        s.scale[j] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return s;
}

void Standardizer::apply(DataSet& ds) const {
    if (mean.size() != ds.dim()) throw ShapeError("standardizer: column count mismatch");
    for (std::size_t j = 0; j < ds.dim(); ++j) {
        if (ds.column_kinds[j] != ColumnKind::continuous) continue;
        auto col = ds.features.col(static_cast<Eigen::Index>(j));
        col.array() = (col.array() - mean[j]) / scale[j];
    }
    if (!ds.features.allFinite()) throw NumericError("standardization produced non-finite features");
}

namespace {

void check_split(const DataSet& ds, const char* name) {
    std::array<std::size_t, 2> group_count{0, 0};
    std::array<std::size_t, 2> label_count{0, 0};
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ++group_count[static_cast<std::size_t>(ds.groups[i])];
        ++label_count[static_cast<std::size_t>(ds.labels[i])];
    }
    if (ds.size() == 0 || group_count[0] == 0 || group_count[1] == 0 || label_count[0] == 0 ||
        label_count[1] == 0) {
        throw SplitError(std::string(name) +
                         " split is empty, single-class or misses a protected group; "
                         "try a different seed or larger fractions");
    }
}

}  // namespace

Splits split_standardize(const DataSet& ds, const SplitSpec& spec) {
    ds.validate();
    for (double f : spec.fractions) {
        if (!(f >= 0.0)) throw ValidationError("split fractions must be non-negative");
    }
    const double total = spec.fractions[0] + spec.fractions[1] + spec.fractions[2];
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");

    const std::size_t n = ds.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(spec.seed);
    std::shuffle(order.begin(), order.end(), rng);

    const auto n_train = static_cast<std::size_t>(std::llround(spec.fractions[0] * static_cast<double>(n)));
    const auto n_valid = std::min(n - std::min(n, n_train),
                                  static_cast<std::size_t>(std::llround(spec.fractions[1] * static_cast<double>(n))));
    const auto train_end = std::min(n, n_train);
    const auto valid_end = train_end + n_valid;

    std::span<const std::size_t> all(order);
    Splits out;
    out.train = ds.subset(all.subspan(0, train_end));
    out.valid = ds.subset(all.subspan(train_end, valid_end - train_end));
    out.test = ds.subset(all.subspan(valid_end));
    check_split(out.train, "train");
    check_split(out.valid, "validation");
    check_split(out.test, "test");

    out.standardizer = Standardizer::fit(out.train);
    out.standardizer.apply(out.train);
    out.standardizer.apply(out.valid);
    out.standardizer.apply(out.test);
    return out;
}

// ---------------------------------------------------------------------------
// CSV loading

CsvSchema CsvSchema::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("schema: ") + e.what());
    }
    CsvSchema s;
    if (!j.contains("label_column") || !j.contains("protected_column")) {
        throw SchemaError("schema: 'label_column' and 'protected_column' are required");
    }
    s.label_column = j.at("label_column").get<std::string>();
    s.protected_column = j.at("protected_column").get<std::string>();
    if (j.contains("label_map")) s.label_map = j.at("label_map").get<std::map<std::string, int>>();
    if (j.contains("protected_map")) s.protected_map = j.at("protected_map").get<std::map<std::string, int>>();
    if (j.contains("categorical_columns")) {
        s.categorical_columns = j.at("categorical_columns").get<std::vector<std::string>>();
    }
    if (j.contains("drop_columns")) s.drop_columns = j.at("drop_columns").get<std::vector<std::string>>();
    if (j.contains("keep_protected_feature")) s.keep_protected_feature = j.at("keep_protected_feature").get<bool>();
    return s;
}

CsvSchema CsvSchema::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open schema file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return from_json_text(buf.str());
}

DataSet load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw LoadError(path.string() + ": empty file");
    std::vector<std::string> header = split_csv_line(line);
    for (auto& h : header) h = trim(h);

    auto find_column = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw SchemaError("column '" + name + "' not found in " + path.string());
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t label_idx = find_column(schema.label_column);
    const std::size_t prot_idx = find_column(schema.protected_column);
    std::set<std::size_t> categorical;
    for (const auto& c : schema.categorical_columns) categorical.insert(find_column(c));
    std::set<std::size_t> dropped;
    for (const auto& c : schema.drop_columns) dropped.insert(find_column(c));

    std::vector<std::vector<std::string>> rows;
    std::size_t row_no = 0;
    while (std::getline(in, line)) {
        ++row_no;
        if (trim(line).empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ValidationError(path.string() + ": row " + std::to_string(row_no) + " has " +
                                  std::to_string(fields.size()) + " fields, expected " +
                                  std::to_string(header.size()));
        }
        for (auto& f : fields) f = trim(f);
        rows.push_back(std::move(fields));
    }

    DataSet ds;
    const std::size_t n = rows.size();
    ds.labels.resize(n);
    ds.groups.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels[i] = map_binary(rows[i][label_idx], schema.label_map, schema.label_column, i + 1);
        ds.groups[i] = map_binary(rows[i][prot_idx], schema.protected_map, schema.protected_column, i + 1);
    }

    // Column plan: (source column, category or empty for numeric).
    struct Plan {
        std::size_t source;
        std::string category;
        ColumnKind kind;
    };
    std::vector<Plan> plan;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (c == label_idx || dropped.count(c)) continue;
        if (c == prot_idx) {
            if (schema.keep_protected_feature) {
                ds.protected_column = plan.size();
                plan.push_back({c, {}, ColumnKind::protected_attr});
                ds.feature_names.push_back(header[c]);
            }
            continue;
        }
        if (categorical.count(c)) {
            std::set<std::string> cats;
            for (const auto& r : rows) cats.insert(r[c]);
            for (const auto& cat : cats) {
                plan.push_back({c, cat, ColumnKind::one_hot});
                ds.feature_names.push_back(header[c] + "=" + cat);
            }
        } else {
            plan.push_back({c, {}, ColumnKind::continuous});
            ds.feature_names.push_back(header[c]);
        }
    }

    ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(plan.size()));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < plan.size(); ++j) {
            const auto& p = plan[j];
            double v = 0.0;
            if (p.kind == ColumnKind::one_hot) {
                v = rows[i][p.source] == p.category ? 1.0 : 0.0;
            } else if (p.kind == ColumnKind::protected_attr) {
                v = ds.groups[i];
            } else {
                auto parsed = parse_double(rows[i][p.source]);
                if (!parsed || !std::isfinite(*parsed)) {
                    throw ValidationError(path.string() + ": row " + std::to_string(i + 1) + ", column '" +
                                          header[p.source] + "': cannot parse '" + rows[i][p.source] +
                                          "' as a number");
                }
                v = *parsed;
            }
            ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
        }
    }
    for (const auto& p : plan) ds.column_kinds.push_back(p.kind);
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Canonical dump

void save_dump(const DataSet& ds, const std::filesystem::path& path) {
    ds.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path.string());
    for (std::size_t j = 0; j < ds.dim(); ++j) out << ds.feature_names[j] << ',';
    out << kLabelColumn << ',' << kProtectedColumn << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dim(); ++j) {
            out << format_double(ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << ',';
        }
        out << ds.labels[i] << ',' << ds.groups[i] << '\n';
    }
}

DataSet load_dump(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw LoadError(path.string() + ": empty file");
    auto header = split_csv_line(line);
    if (header.size() < 2 || header[header.size() - 2] != kLabelColumn || header.back() != kProtectedColumn) {
        throw SchemaError(path.string() + ": not a dataset dump (missing __label__/__protected__ columns)");
    }
    const std::size_t d = header.size() - 2;

    std::vector<std::vector<double>> values;
    DataSet ds;
    std::size_t row_no = 0;
    while (std::getline(in, line)) {
        ++row_no;
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ValidationError(path.string() + ": row " + std::to_string(row_no) + " has wrong field count");
        }
        std::vector<double> row(d);
        for (std::size_t j = 0; j < d; ++j) {
            auto v = parse_double(fields[j]);
            if (!v) throw ValidationError(path.string() + ": row " + std::to_string(row_no) + " unparseable value");
            row[j] = *v;
        }
        ds.labels.push_back(map_binary(fields[d], {}, kLabelColumn, row_no));
        ds.groups.push_back(map_binary(fields[d + 1], {}, kProtectedColumn, row_no));
        values.push_back(std::move(row));
    }
    ds.features.resize(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < values.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i][j];
        }
    }
    ds.feature_names.assign(header.begin(), header.begin() + static_cast<std::ptrdiff_t>(d));
    for (std::size_t j = 0; j < d; ++j) {
        ColumnKind kind = ds.feature_names[j].find('=') != std::string::npos ? ColumnKind::one_hot
                                                                              : ColumnKind::continuous;
        if (kind == ColumnKind::continuous && !ds.protected_column) {
            bool matches = true;
            for (std::size_t i = 0; i < ds.size() && matches; ++i) {
                matches = ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) ==
                          static_cast<double>(ds.groups[i]);
            }
            if (matches) {
                kind = ColumnKind::protected_attr;
                ds.protected_column = j;
            }
        }
        ds.column_kinds.push_back(kind);
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic generator

DataSet generate_synthetic(const SyntheticSpec& spec) {
    if (spec.d < 2) throw ValidationError("synthetic: need at least 2 features (one is the protected column)");
    if (!(spec.target_spd >= 0.0 && spec.target_spd <= 1.0)) throw ValidationError("synthetic: target_spd in [0,1]");
    if (!(spec.group0_fraction > 0.0 && spec.group0_fraction < 1.0)) {
        throw ValidationError("synthetic: group0_fraction in (0,1)");
    }
    if (!(spec.label_noise >= 0.0 && spec.label_noise < 0.5)) throw ValidationError("synthetic: label_noise in [0,0.5)");

    // Observed positive rates are centred on 0.5. Pre-noise rates are chosen so
    // that flipping with probability eta lands exactly on them in expectation.
    const double eta = spec.label_noise;
    const std::array<double, 2> observed{0.5 + spec.target_spd / 2.0, 0.5 - spec.target_spd / 2.0};
    std::array<double, 2> clean{};
    for (int a = 0; a < 2; ++a) {
        clean[a] = (observed[a] - eta) / (1.0 - 2.0 * eta);
        if (clean[a] < 0.0 || clean[a] > 1.0) {
            throw GenerationError("synthetic: target_spd too large for the requested label_noise");
        }
    }

    const std::size_t k = spec.d - 1;
    const std::size_t informative = (k + 1) / 2;

    Rng rng(spec.seed);
    std::bernoulli_distribution pick_group0(spec.group0_fraction);
    std::bernoulli_distribution flip(eta);
    std::normal_distribution<double> noise(0.0, 1.0);

    DataSet ds;
    ds.features.resize(static_cast<Eigen::Index>(spec.n), static_cast<Eigen::Index>(spec.d));
    ds.labels.resize(spec.n);
    ds.groups.resize(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const int a = pick_group0(rng) ? 0 : 1;
        const int clean_label = std::bernoulli_distribution(clean[static_cast<std::size_t>(a)])(rng) ? 1 : 0;
        const auto row = static_cast<Eigen::Index>(i);
        for (std::size_t j = 0; j < k; ++j) {
            const double centre = j < informative ? spec.signal * (2.0 * clean_label - 1.0)
                                                  : spec.group_shift * (1.0 - 2.0 * a);
            ds.features(row, static_cast<Eigen::Index>(j)) = centre + noise(rng);
        }
        ds.features(row, static_cast<Eigen::Index>(k)) = a;
        ds.groups[i] = a;
        ds.labels[i] = flip(rng) ? 1 - clean_label : clean_label;
    }
    for (std::size_t j = 0; j < k; ++j) {
        ds.feature_names.push_back("x" + std::to_string(j));
        ds.column_kinds.push_back(ColumnKind::continuous);
    }
    ds.feature_names.push_back("group");
    ds.column_kinds.push_back(ColumnKind::protected_attr);
    ds.protected_column = k;

    std::array<std::array<std::size_t, 2>, 2> cells{};
    for (std::size_t i = 0; i < spec.n; ++i) {
        ++cells[static_cast<std::size_t>(ds.groups[i])][static_cast<std::size_t>(ds.labels[i])];
    }
    for (const auto& g : cells) {
        if (g[0] == 0 || g[1] == 0) {
            throw GenerationError("synthetic: n=" + std::to_string(spec.n) +
                                  " too small to realise both groups and both classes");
        }
    }
    return ds;
}

}  // namespace intrafair
