#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mdtbox/config.hpp"
#include "mdtbox/errors.hpp"

using namespace mdtbox;
namespace fs = std::filesystem;

TEST_CASE("kv parsing: comments, whitespace, errors") {
    KvConfig kv = parse_kv_text("# comment\n\n a.b = 12 \nc=hello world\n");
    CHECK(kv.size() == 2);
    CHECK(kv["a.b"] == "12");
    CHECK(kv["c"] == "hello world");

    CHECK_THROWS_AS(parse_kv_text("novalue\n"), ConfigError);
    CHECK_THROWS_AS(parse_kv_text("= 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_kv_text("a=1\na=2\n"), ConfigError);
}

TEST_CASE("serialization round-trips and the hash is canonical") {
    KvConfig kv{{"b", "2"}, {"a", "1"}};
    KvConfig back = parse_kv_text(serialize_kv(kv));
    CHECK(back == kv);

    KvConfig same{{"a", "1"}, {"b", "2"}};
    CHECK(config_hash(kv) == config_hash(same));
    KvConfig differ{{"a", "1"}, {"b", "3"}};
    CHECK(config_hash(kv) != config_hash(differ));
    CHECK(config_hash_hex(kv).size() == 16);
}

TEST_CASE("file io: write then parse") {
    fs::path p = fs::temp_directory_path() / "mdtbox_cfg_test.cfg";
    KvConfig kv{{"x", "1.5"}, {"name", "run"}};
    write_kv_file(p, kv);
    CHECK(parse_kv_file(p) == kv);
    fs::remove(p);
    CHECK_THROWS_AS(parse_kv_file(p), IoError);
}
