#include "intrafair/data.hpp"
#include "intrafair/error.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace intrafair;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& text) {
    const auto dir = std::filesystem::temp_directory_path() / "intrafair-test-data";
    std::filesystem::create_directories(dir);
    const auto path = dir / name;
    std::ofstream(path) << text;
    return path;
}

double empirical_label_gap(const DataSet& ds) {
    double pos[2] = {0, 0};
    double cnt[2] = {0, 0};
    for (std::size_t i = 0; i < ds.size(); ++i) {
        cnt[ds.groups[i]] += 1;
        pos[ds.groups[i]] += ds.labels[i];
    }
    return pos[0] / cnt[0] - pos[1] / cnt[1];
}

DataSet small_dataset(std::size_t n) {
    SyntheticSpec s;
    s.n = n;
    s.seed = 3;
    return generate_synthetic(s);
}

}  // namespace

TEST_CASE("csv loading maps labels and keeps the protected column") {
    const auto csv = temp_file("four.csv",
                               "age,workclass,sex,income\n"
                               "39,State-gov,Male,>50K\n"
                               "50,Private,Female,<=50K\n"
                               "38,Private,Male,<=50K\n"
                               "53,Self-emp,Female,>50K\n");
    CsvSchema schema;
    schema.label_column = "income";
    schema.label_map = {{">50K", 1}, {"<=50K", 0}};
    schema.protected_column = "sex";
    schema.protected_map = {{"Male", 0}, {"Female", 1}};
    schema.categorical_columns = {"workclass"};
    const auto ds = load_csv(csv, schema);
    CHECK(ds.labels == BinaryVector{1, 0, 0, 1});
    CHECK(ds.groups == BinaryVector{0, 1, 0, 1});
    REQUIRE(ds.protected_column.has_value());
    CHECK(ds.column_kinds[*ds.protected_column] == ColumnKind::protected_attr);
    // age + three one-hot workclass columns + sex
    CHECK(ds.dim() == 5);
    std::size_t one_hot = 0;
    for (auto k : ds.column_kinds) one_hot += k == ColumnKind::one_hot ? 1 : 0;
    CHECK(one_hot == 3);
    CHECK(ds.features(0, 0) == 39.0);
}

TEST_CASE("csv loading errors") {
    CsvSchema schema;
    schema.label_column = "y";
    schema.protected_column = "a";
    SUBCASE("three-valued protected column") {
        const auto csv = temp_file("three.csv", "x,a,y\n1,0,1\n2,1,0\n3,2,1\n");
        CHECK_THROWS_AS(load_csv(csv, schema), ValidationError);
    }
    SUBCASE("missing column") {
        const auto csv = temp_file("missing.csv", "x,y\n1,1\n2,0\n");
        CHECK_THROWS_AS(load_csv(csv, schema), SchemaError);
    }
    SUBCASE("unparseable value") {
        const auto csv = temp_file("bad.csv", "x,a,y\n1,0,1\nabc,1,0\n");
        CHECK_THROWS_AS(load_csv(csv, schema), Error);
    }
}

TEST_CASE("schema from json text") {
    const auto s = CsvSchema::from_json_text(
        R"({"label_column": "y", "protected_column": "a", "categorical_columns": ["c"], "label_map": {"yes": 1, "no": 0}})");
    CHECK(s.label_column == "y");
    CHECK(s.categorical_columns == std::vector<std::string>{"c"});
    CHECK(s.label_map.at("yes") == 1);
    CHECK_THROWS_AS(CsvSchema::from_json_text(R"({"label_column": "y"})"), SchemaError);
}

TEST_CASE("split sizes, disjointness and determinism") {
    SyntheticSpec s;
    s.n = 10;
    s.target_spd = 0.0;
    s.seed = 1;
    DataSet ds;
    // Small data may not realise every group/class cell in every split; search a seed that does.
    std::optional<Splits> splits;
    for (Seed seed = 0; seed < 200 && !splits; ++seed) {
        s.seed = seed;
        try {
            ds = generate_synthetic(s);
            splits = split_standardize(ds, SplitSpec{{0.6, 0.2, 0.2}, seed});
        } catch (const Error&) {
        }
    }
    REQUIRE(splits.has_value());
    CHECK(splits->train.size() == 6);
    CHECK(splits->valid.size() == 2);
    CHECK(splits->test.size() == 2);

    const auto big = small_dataset(500);
    const auto a = split_standardize(big, SplitSpec{{0.6, 0.2, 0.2}, 9});
    const auto b = split_standardize(big, SplitSpec{{0.6, 0.2, 0.2}, 9});
    CHECK(a.train == b.train);
    CHECK(a.valid == b.valid);
    CHECK(a.test == b.test);
    CHECK(a.train.size() + a.valid.size() + a.test.size() == big.size());
}

TEST_CASE("standardization uses train statistics only") {
    const auto ds = small_dataset(1000);
    const auto sp = split_standardize(ds, SplitSpec{{0.6, 0.2, 0.2}, 4});
    for (std::size_t j = 0; j < sp.train.dim(); ++j) {
        const auto col = sp.train.features.col(static_cast<Eigen::Index>(j));
        if (sp.train.column_kinds[j] != ColumnKind::continuous) {
            // Protected column untouched.
            for (Eigen::Index i = 0; i < col.size(); ++i) CHECK(col(i) == sp.train.groups[static_cast<std::size_t>(i)]);
            continue;
        }
        const double mean = col.mean();
        const double sd = std::sqrt((col.array() - mean).square().mean());
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(sd - 1.0) < 1e-9);
    }
    CHECK(sp.test.features.allFinite());
}

TEST_CASE("constant column keeps scale 1") {
    auto ds = small_dataset(300);
    ds.features.col(0).setConstant(4.0);
    const auto sp = split_standardize(ds, SplitSpec{{0.6, 0.2, 0.2}, 2});
    CHECK(sp.standardizer.scale[0] == 1.0);
    CHECK(sp.train.features.col(0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("bad split fractions are rejected") {
    const auto ds = small_dataset(300);
    CHECK_THROWS_AS(split_standardize(ds, SplitSpec{{0.5, 0.2, 0.2}, 0}), ValidationError);
    CHECK_THROWS_AS(split_standardize(ds, SplitSpec{{1.0, 0.0, 0.0}, 0}), SplitError);
}

TEST_CASE("synthetic label gap") {
    SyntheticSpec s;
    s.n = 20000;
    s.target_spd = 0.3;
    for (Seed seed : {0, 1, 2}) {
        s.seed = seed;
        const double gap = empirical_label_gap(generate_synthetic(s));
        CHECK(gap >= 0.27);
        CHECK(gap <= 0.33);
    }
    s.target_spd = 0.0;
    s.label_noise = 0.0;
    s.group0_fraction = 0.5;
    const double gap = empirical_label_gap(generate_synthetic(s));
    CHECK(std::abs(gap) < 3.0 / std::sqrt(20000.0));
}

TEST_CASE("synthetic generation is deterministic and validates its spec") {
    SyntheticSpec s;
    s.n = 2000;
    s.seed = 42;
    const auto a = generate_synthetic(s);
    const auto b = generate_synthetic(s);
    CHECK(a == b);
    CHECK(a.content_hash() == b.content_hash());
    s.seed = 43;
    CHECK(generate_synthetic(s).content_hash() != a.content_hash());

    SyntheticSpec tiny;
    tiny.n = 2;
    CHECK_THROWS_AS(generate_synthetic(tiny), GenerationError);
    SyntheticSpec noisy;
    noisy.label_noise = 0.5;
    CHECK_THROWS_AS(generate_synthetic(noisy), ValidationError);
}

TEST_CASE("dump round trip") {
    const auto csv = temp_file("cats.csv", "c,a,x,y\nred,0,1.5,1\nblue,1,-2.25,0\nred,1,0.1,1\nblue,0,3,0\n");
    CsvSchema schema;
    schema.label_column = "y";
    schema.protected_column = "a";
    schema.categorical_columns = {"c"};
    const auto ds = load_csv(csv, schema);
    const auto path = std::filesystem::temp_directory_path() / "intrafair-test-data" / "dump.csv";
    save_dump(ds, path);
    const auto back = load_dump(path);
    CHECK(back == ds);

    const auto syn = small_dataset(200);
    save_dump(syn, path);
    CHECK(load_dump(path) == syn);
}

TEST_CASE("shipped schemas load files in their documented layout") {
    const std::filesystem::path dir = INTRAFAIR_SCHEMA_DIR;
    const auto adult = load_csv(
        temp_file("adult.csv",
                  "age,workclass,fnlwgt,education,education-num,marital-status,occupation,relationship,race,sex,"
                  "capital-gain,capital-loss,hours-per-week,native-country,income\n"
                  "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, "
                  "2174, 0, 40, United-States, <=50K\n"
                  "31, Private, 45781, Masters, 14, Never-married, Prof-specialty, Not-in-family, White, Female, "
                  "14084, 0, 50, United-States, >50K.\n"),
        CsvSchema::from_file(dir / "adult.json"));
    CHECK(adult.labels == BinaryVector{0, 1});
    CHECK(adult.groups == BinaryVector{1, 0});

    const auto compas = load_csv(
        temp_file("compas.csv",
                  "sex,age,age_cat,race,juv_fel_count,juv_misd_count,juv_other_count,priors_count,c_charge_degree,"
                  "two_year_recid\n"
                  "Male,34,25 - 45,African-American,0,0,0,0,F,1\n"
                  "Female,24,Less than 25,Caucasian,0,0,1,4,M,0\n"),
        CsvSchema::from_file(dir / "compas.json"));
    CHECK(compas.labels == BinaryVector{1, 0});
    CHECK(compas.groups == BinaryVector{0, 1});

    const auto bank = load_csv(
        temp_file("bank.csv",
                  "age,job,marital,education,default,housing,loan,contact,month,day_of_week,duration,campaign,pdays,"
                  "previous,poutcome,emp.var.rate,cons.price.idx,cons.conf.idx,euribor3m,nr.employed,y,age_group\n"
                  "56,housemaid,married,basic.4y,no,no,no,telephone,may,mon,261,1,999,0,nonexistent,1.1,93.994,"
                  "-36.4,4.857,5191,no,older\n"
                  "22,services,single,high.school,no,yes,no,cellular,may,mon,149,1,999,0,nonexistent,1.1,93.994,"
                  "-36.4,4.857,5191,yes,young\n"),
        CsvSchema::from_file(dir / "bank.json"));
    CHECK(bank.labels == BinaryVector{0, 1});
    CHECK(bank.groups == BinaryVector{1, 0});
    for (const auto& name : bank.feature_names) CHECK(name != "duration");
}
