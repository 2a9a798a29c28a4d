#include <doctest.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "uqseg/io.hpp"

using namespace uqseg;

namespace {

std::string bytes_of(const Tensor& t, io::DType dtype)
{
    std::ostringstream os;
    io::write_uqt(os, t, dtype);
    return os.str();
}

void write_raw(const std::filesystem::path& p, const std::string& bytes)
{
    std::ofstream(p, std::ios::binary) << bytes;
}

} // namespace

TEST_SUITE("uqt")
{
    TEST_CASE("header layout is bit exact")
    {
        const Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
        const std::string b = bytes_of(t, io::DType::f32);
        REQUIRE(b.size() == 4 + 1 + 1 + 2 * 4 + 6 * 4);
        CHECK(b.substr(0, 4) == "UQT1");
        CHECK(b[4] == 0); // f32
        CHECK(b[5] == 2); // ndim
        CHECK(static_cast<unsigned char>(b[6]) == 2);
        CHECK(b[7] == 0);
        CHECK(static_cast<unsigned char>(b[10]) == 3);
        float first = 0.0f;
        std::memcpy(&first, b.data() + 14, 4);
        CHECK(first == 1.0f);
        CHECK(bytes_of(t, io::DType::f64)[4] == 1);
        CHECK(bytes_of(t, io::DType::f64).size() == 14 + 6 * 8);
    }

    TEST_CASE("round trip property over random shapes")
    {
        Rng rng(1);
        std::uniform_int_distribution<std::size_t> nd(0, 4), extent(1, 5);
        for (int trial = 0; trial < 200; ++trial) {
            Shape shape(nd(rng));
            for (auto& d : shape) d = extent(rng);
            const Tensor t = testing::random_tensor(shape, rng, -1e3, 1e3);
            std::istringstream f64(bytes_of(t, io::DType::f64));
            CHECK(io::read_uqt(f64) == t);
            std::istringstream f32(bytes_of(t, io::DType::f32));
            const Tensor back = io::read_uqt(f32);
            REQUIRE(back.shape() == t.shape());
            for (std::size_t i = 0; i < t.size(); ++i)
                CHECK(back[i] == static_cast<double>(static_cast<float>(t[i])));
        }
    }

    TEST_CASE("file round trip and corrupt files")
    {
        testing::TempDir dir("uqt");
        const Tensor t({3, 2}, 0.25);
        io::save_uqt(dir / "nested/a.uqt", t, io::DType::f64);
        CHECK(io::load_uqt(dir / "nested/a.uqt") == t);

        const std::string good = bytes_of(t, io::DType::f32);
        write_raw(dir / "magic.uqt", "XQT1" + good.substr(4));
        write_raw(dir / "dtype.uqt", good.substr(0, 4) + '\x07' + good.substr(5));
        write_raw(dir / "short.uqt", good.substr(0, good.size() - 3));
        write_raw(dir / "long.uqt", good + "zz");
        for (const char* name : {"magic.uqt", "dtype.uqt", "short.uqt", "long.uqt"}) {
            const auto p = dir / name;
            try {
                io::load_uqt(p);
                FAIL("corrupt file accepted: " << name);
            } catch (const std::runtime_error& e) {
                CHECK(std::string(e.what()).find(p.string()) != std::string::npos);
            }
        }
        CHECK_THROWS_WITH_AS(io::load_uqt(dir / "missing.uqt"),
                             doctest::Contains("missing.uqt"), std::runtime_error);
    }
}

TEST_SUITE("model files")
{
    TEST_CASE("header and tensors round trip")
    {
        testing::TempDir dir("model");
        io::ModelFile m;
        m.set("kind", "test");
        m.set("layer", "relu");
        m.set("layer", "dense 2 3");
        m.tensors.push_back(Tensor({3, 2}, 1.0 / 3.0));
        io::save_model(dir / "m.uqm", m);
        const io::ModelFile back = io::load_model(dir / "m.uqm");
        CHECK(back.get("kind") == "test");
        CHECK(back.get_all("layer") == std::vector<std::string>{"relu", "dense 2 3"});
        REQUIRE(back.tensors.size() == 1);
        CHECK(back.tensors[0] == m.tensors[0]);
        CHECK_THROWS_WITH(back.get("absent"), doctest::Contains("m.uqm"));
    }

    TEST_CASE("corrupt model files name the path")
    {
        testing::TempDir dir("model_bad");
        write_raw(dir / "a.uqm", "not a model\n");
        write_raw(dir / "b.uqm", "uqseg-model 1\nkind x\n");
        write_raw(dir / "c.uqm", "uqseg-model 1\ntensors 2\nend\n");
        for (const char* name : {"a.uqm", "b.uqm", "c.uqm"})
            CHECK_THROWS_WITH(io::load_model(dir / name), doctest::Contains(name));
    }
}

TEST_SUITE("csv")
{
    TEST_CASE("round trip and column lookup")
    {
        testing::TempDir dir("csv");
        io::CsvTable t;
        t.columns = {"id", "x"};
        t.rows = {{"a", "1.5"}, {"b", ""}};
        io::write_csv(dir / "t.csv", t);
        const io::CsvTable back = io::read_csv(dir / "t.csv");
        CHECK(back.columns == t.columns);
        CHECK(back.rows == t.rows);
        CHECK(back.column("x") == 1);
        CHECK_THROWS_WITH(back.column("y"), doctest::Contains("t.csv"));
    }

    TEST_CASE("ragged rows are rejected with line numbers")
    {
        testing::TempDir dir("csv_bad");
        write_raw(dir / "r.csv", "a,b\n1,2\n3\n");
        CHECK_THROWS_WITH(io::read_csv(dir / "r.csv"), doctest::Contains("r.csv:3"));
    }

    TEST_CASE("number formatting is locale free and round trips")
    {
        CHECK(io::format_double(0.5) == "0.5");
        CHECK(io::format_double(-0.4) == "-0.4");
        CHECK(io::parse_double("1e-3", "ctx") == 0.001);
        CHECK_THROWS_WITH(io::parse_double("1,5", "ctx"), doctest::Contains("ctx"));
        CHECK_THROWS(io::parse_double("", "ctx"));
        CHECK(io::parse_size("12", "ctx") == 12u);
        CHECK_THROWS(io::parse_size("-1", "ctx"));
        CHECK_THROWS(io::parse_size("3x", "ctx"));
    }
}

TEST_SUITE("pgm")
{
    TEST_CASE("min-max scaled 8-bit output")
    {
        testing::TempDir dir("pgm");
        const Tensor map({2, 2}, std::vector<double>{0.0, 0.5, 1.0, 0.25});
        io::write_pgm(dir / "m.pgm", map);
        const io::PgmImage img = io::read_pgm(dir / "m.pgm");
        CHECK(img.width == 2);
        CHECK(img.height == 2);
        CHECK(img.pixels == std::vector<unsigned char>{0, 128, 255, 64});
    }

    TEST_CASE("constant maps become black")
    {
        testing::TempDir dir("pgm_const");
        io::write_pgm(dir / "c.pgm", Tensor({3, 2}, 7.0));
        const io::PgmImage img = io::read_pgm(dir / "c.pgm");
        CHECK(img.width == 2);
        CHECK(img.height == 3);
        CHECK(img.pixels == std::vector<unsigned char>(6, 0));
        CHECK_THROWS(io::write_pgm(dir / "x.pgm", Tensor({2, 2, 2})));
    }
}

TEST_SUITE("key values")
{
    TEST_CASE("round trip keeps order and rejects malformed lines")
    {
        testing::TempDir dir("kv");
        io::write_key_values(dir / "a.cfg", {{"b", "1"}, {"a", "x y"}});
        const auto kv = io::read_key_values(dir / "a.cfg");
        REQUIRE(kv.size() == 2);
        CHECK(kv[0] == std::pair<std::string, std::string>{"b", "1"});
        CHECK(kv[1] == std::pair<std::string, std::string>{"a", "x y"});
        write_raw(dir / "bad.cfg", "novalue\n");
        CHECK_THROWS_WITH(io::read_key_values(dir / "bad.cfg"), doctest::Contains("bad.cfg"));
    }
}
