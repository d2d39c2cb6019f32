#pragma once

#include "kbal/common.hpp"
#include "kbal/dataset.hpp"

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>
#include <json.hpp>
#include <openssl/evp.h>

#include <boost/iostreams/copy.hpp>
#include <boost/iostreams/device/array.hpp>
#include <boost/iostreams/device/back_inserter.hpp>
#include <boost/iostreams/filter/bzip2.hpp>
#include <boost/iostreams/filter/zlib.hpp>
#include <boost/iostreams/filtering_stream.hpp>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace kbal {

#ifndef KBAL_DATA_DIR
#define KBAL_DATA_DIR "data"
#endif

/// Default location of the manifest and the bundled copy of the benchmark.
inline std::filesystem::path default_data_dir() { return KBAL_DATA_DIR; }

struct ManifestEntry {
    std::string name;
    std::string url;  // empty for files derived from another entry
    std::string sha256;
    std::uint64_t bytes = 0;
    std::string source;  // derived files: entry name of the archive
    std::string member;  // derived files: path inside the archive
};

struct Manifest {
    std::string version;
    std::map<std::string, ManifestEntry> entries;

    const ManifestEntry& at(const std::string& name) const {
        const auto it = entries.find(name);
        if (it == entries.end()) throw Error("manifest has no entry '" + name + "'");
        return it->second;
    }
};

inline Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest '" + path.string() + "'");
    const auto j = nlohmann::json::parse(in);
    Manifest m;
    m.version = j.value("version", "");
    for (const auto& e : j.at("files")) {
        ManifestEntry entry;
        entry.name = e.at("name").get<std::string>();
        entry.url = e.value("url", "");
        entry.sha256 = e.at("sha256").get<std::string>();
        entry.bytes = e.at("bytes").get<std::uint64_t>();
        entry.source = e.value("source", "");
        entry.member = e.value("member", "");
        m.entries[entry.name] = entry;
    }
    return m;
}

inline std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Writes via a temporary file and rename so readers never see partial files.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view data) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) throw Error("cannot write '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

/// GET over http(s), following redirects.
inline std::string http_get(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error("bad url '" + url + "'");
    const auto path_start = url.find('/', scheme_end + 3);
    const std::string origin = url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);
    httplib::Client client(origin);
    client.set_follow_location(true);
    client.set_connection_timeout(20);
    client.set_read_timeout(120);
    if (std::filesystem::exists("/etc/ssl/certs/ca-certificates.crt")) client.set_ca_cert_path("/etc/ssl/certs/ca-certificates.crt");
    const auto res = client.Get(path);
    if (!res) throw Error("download of '" + url + "' failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw Error("download of '" + url + "' failed with HTTP " + std::to_string(res->status));
    return res->body;
}

namespace detail {

inline std::uint32_t le32(std::string_view s, std::size_t at) {
    if (at + 4 > s.size()) throw Error("zip: truncated archive");
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | static_cast<unsigned char>(s[at + static_cast<std::size_t>(k)]);
    return v;
}

inline std::uint16_t le16(std::string_view s, std::size_t at) {
    if (at + 2 > s.size()) throw Error("zip: truncated archive");
    return static_cast<std::uint16_t>(static_cast<unsigned char>(s[at]) | (static_cast<unsigned char>(s[at + 1]) << 8));
}

template <class Filter>
std::string run_filter(std::string_view in, Filter filter) {
    namespace io = boost::iostreams;
    std::string out;
    io::filtering_istream stream;
    stream.push(filter);
    stream.push(io::array_source(in.data(), in.size()));
    io::copy(stream, io::back_inserter(out));
    return out;
}

}  // namespace detail

/// Extracts one member of a zip archive (stored or deflated).
inline std::string zip_member(std::string_view zip, const std::string& member) {
    // End-of-central-directory record sits in the last 64 KiB + 22 bytes.
    const std::size_t min_pos = zip.size() > 65557 ? zip.size() - 65557 : 0;
    std::size_t eocd = std::string_view::npos;
    for (std::size_t pos = zip.size() >= 22 ? zip.size() - 22 : 0; pos + 1 > min_pos; --pos) {
        if (detail::le32(zip, pos) == 0x06054b50) {
            eocd = pos;
            break;
        }
        if (pos == 0) break;
    }
    if (eocd == std::string_view::npos) throw Error("zip: no end of central directory");
    const std::uint16_t count = detail::le16(zip, eocd + 10);
    std::size_t at = detail::le32(zip, eocd + 16);
    for (std::uint16_t k = 0; k < count; ++k) {
        if (detail::le32(zip, at) != 0x02014b50) throw Error("zip: corrupt central directory");
        const std::uint16_t method = detail::le16(zip, at + 10);
        const std::uint32_t csize = detail::le32(zip, at + 20);
        const std::uint16_t name_len = detail::le16(zip, at + 28);
        const std::uint16_t extra_len = detail::le16(zip, at + 30);
        const std::uint16_t comment_len = detail::le16(zip, at + 32);
        const std::uint32_t local = detail::le32(zip, at + 42);
        const std::string_view name = zip.substr(at + 46, name_len);
        if (name == member) {
            if (detail::le32(zip, local) != 0x04034b50) throw Error("zip: corrupt local header");
            const std::size_t data = local + 30 + detail::le16(zip, local + 26) + detail::le16(zip, local + 28);
            if (data + csize > zip.size()) throw Error("zip: truncated member");
            const std::string_view raw = zip.substr(data, csize);
            if (method == 0) return std::string(raw);
            if (method != 8) throw Error("zip: unsupported compression method " + std::to_string(method));
            boost::iostreams::zlib_params params;
            params.noheader = true;  // zip stores raw deflate
            return detail::run_filter(raw, boost::iostreams::zlib_decompressor(params));
        }
        at += 46 + name_len + extra_len + comment_len;
    }
    throw Error("zip: member '" + member + "' not found");
}

inline std::string bunzip2(std::string_view data) { return detail::run_filter(data, boost::iostreams::bzip2_decompressor()); }

namespace detail {

inline std::string cents(double dollars) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", std::round(dollars * 100.0) / 100.0);
    return buf;
}

}  // namespace detail

/// Splits the combined NSW-treated / PSID-1 table (earnings in thousands of
/// dollars) into the two benchmark files, with earnings in dollars.
inline std::pair<std::string, std::string> split_nsw_psid(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw Error("benchmark source is empty");
    const auto header = detail::split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < header.size(); ++j) col[detail::trim(header[j])] = j;
    for (const char* need : {"train", "age", "educ", "black", "hisp", "married", "re74", "re75", "re78"})
        if (!col.count(need)) throw Error(std::string("benchmark source lacks column '") + need + "'");

    const std::string out_header = "treat,age,education,black,hispanic,married,nodegree,re74,re75,re78\n";
    std::string treated = out_header, control = out_header;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split_csv_line(line);
        auto num = [&](const char* name) {
            const auto v = detail::parse_number(detail::trim(f.at(col[name])));
            if (!v) throw Error(std::string("benchmark source: bad value in column '") + name + "'");
            return *v;
        };
        const int treat = static_cast<int>(num("train"));
        const double educ = num("educ");
        std::ostringstream row;
        row << treat << ',' << static_cast<int>(num("age")) << ',' << static_cast<int>(educ) << ',' << static_cast<int>(num("black"))
            << ',' << static_cast<int>(num("hisp")) << ',' << static_cast<int>(num("married")) << ',' << (educ < 12 ? 1 : 0) << ','
            << detail::cents(1000.0 * num("re74")) << ',' << detail::cents(1000.0 * num("re75")) << ','
            << detail::cents(1000.0 * num("re78")) << '\n';
        (treat == 1 ? treated : control) += row.str();
    }
    return {treated, control};
}

namespace detail {

class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir) {
        const auto path = (dir / ".lock").string();
        fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ < 0) throw Error("cannot open lock file '" + path + "'");
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            throw Error("cannot lock '" + path + "'");
        }
    }
    ~DirectoryLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    int fd_ = -1;
};

inline bool matches(const std::filesystem::path& path, const ManifestEntry& e) {
    std::error_code ec;
    if (!std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) != e.bytes) return false;
    return sha256_hex(read_file(path)) == e.sha256;
}

}  // namespace detail

struct FetchOptions {
    std::filesystem::path data_dir = default_data_dir();  // manifest + bundled copy
    bool allow_network = true;
    bool use_bundled = true;  // fall back to the copy shipped in data_dir/benchmark
};

/// Makes sure `cache_dir/<name>.csv` exists with the pinned checksum and
/// returns its path. Network is touched only when the cache is cold.
inline std::filesystem::path ensure_benchmark_file(const std::string& name, const std::filesystem::path& cache_dir,
                                                   const FetchOptions& opt = {}) {
    const Manifest manifest = load_manifest(opt.data_dir / "benchmark_manifest.json");
    const ManifestEntry& entry = manifest.at(name + ".csv");
    std::filesystem::create_directories(cache_dir);
    detail::DirectoryLock lock(cache_dir);
    const auto target = cache_dir / entry.name;
    if (detail::matches(target, entry)) return target;

    std::string failure;
    if (opt.allow_network && !entry.source.empty()) {
        try {
            const ManifestEntry& archive = manifest.at(entry.source);
            const std::string bytes = http_get(archive.url);
            if (sha256_hex(bytes) != archive.sha256) throw Error("checksum mismatch for downloaded '" + archive.name + "'");
            const auto [treated, control] = split_nsw_psid(bunzip2(zip_member(bytes, entry.member)));
            for (const auto& [file, text] : {std::pair{std::string("nsw_dw.csv"), treated}, std::pair{std::string("psid1.csv"), control}}) {
                const ManifestEntry& e = manifest.at(file);
                if (sha256_hex(text) != e.sha256) throw Error("checksum mismatch for extracted '" + file + "'");
                write_file_atomic(cache_dir / file, text);
            }
            return target;
        } catch (const Error& e) {
            failure = e.what();
        }
    }
    if (opt.use_bundled) {
        const auto bundled = opt.data_dir / "benchmark" / entry.name;
        if (detail::matches(bundled, entry)) {
            write_file_atomic(target, read_file(bundled));
            return target;
        }
        if (std::filesystem::exists(bundled)) throw Error("checksum mismatch for bundled '" + bundled.string() + "'");
    }
    throw Error("benchmark '" + name + "' unavailable: " + (failure.empty() ? std::string("network disabled and cache empty") : failure));
}

namespace detail {

// Adds u74 and u75 (zero earnings indicators) to a benchmark file.
inline Dataset with_unemployment(Dataset ds) {
    const Index r74 = ds.column_index("re74"), r75 = ds.column_index("re75");
    Matrix X(ds.n(), ds.p() + 2);
    X.leftCols(ds.p()) = ds.X;
    for (Index i = 0; i < ds.n(); ++i) {
        X(i, ds.p()) = ds.X(i, r74) == 0.0 ? 1.0 : 0.0;
        X(i, ds.p() + 1) = ds.X(i, r75) == 0.0 ? 1.0 : 0.0;
    }
    ds.X = std::move(X);
    ds.column_names.push_back("u74");
    ds.column_names.push_back("u75");
    return ds;
}

inline Dataset reorder(const Dataset& ds, const std::vector<std::string>& names) {
    Dataset out;
    out.X.resize(ds.n(), static_cast<Index>(names.size()));
    for (std::size_t j = 0; j < names.size(); ++j) out.X.col(static_cast<Index>(j)) = ds.X.col(ds.column_index(names[j]));
    out.D = ds.D;
    out.Y = ds.Y;
    out.column_names = names;
    return out;
}

// Reads a benchmark CSV without the group validation (each file is one arm).
inline Dataset read_benchmark_csv(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    const auto header = split_csv_line(line);
    Dataset ds;
    for (const auto& h : header)
        if (h != "treat" && h != "re78") ds.column_names.push_back(trim(h));
    std::vector<std::vector<double>> rows;
    std::vector<double> y;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != header.size()) throw Error("'" + path.string() + "': wrong field count");
        std::vector<double> row;
        for (std::size_t j = 0; j < f.size(); ++j) {
            const auto v = parse_number(trim(f[j]));
            if (!v) throw Error("'" + path.string() + "': non-numeric value");
            if (header[j] == "treat") ds.D.push_back(static_cast<int>(*v));
            else if (header[j] == "re78") y.push_back(*v);
            else row.push_back(*v);
        }
        rows.push_back(std::move(row));
    }
    ds.X.resize(static_cast<Index>(rows.size()), static_cast<Index>(ds.column_names.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) ds.X(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    ds.Y = Eigen::Map<Vector>(y.data(), static_cast<Index>(y.size()));
    return ds;
}

}  // namespace detail

inline const std::vector<std::string>& standard_covariates() {
    static const std::vector<std::string> names = {"age", "education", "re74", "re75", "black", "hispanic", "married", "u74", "u75", "nodegree"};
    return names;
}

/// One arm of the benchmark (nsw_dw: 185 treated; psid1: 2490 controls) with
/// the 10 standard covariates and outcome re78.
inline Dataset fetch_benchmark(const std::string& name, const std::filesystem::path& cache_dir, const FetchOptions& opt = {}) {
    if (name != "nsw_dw" && name != "psid1") throw Error("unknown benchmark file '" + name + "' (expected nsw_dw or psid1)");
    const auto path = ensure_benchmark_file(name, cache_dir, opt);
    return detail::reorder(detail::with_unemployment(detail::read_benchmark_csv(path)), standard_covariates());
}

enum class CovariateSet { standard, simple, squares };

inline CovariateSet parse_covariate_set(std::string_view s) {
    if (s == "standard") return CovariateSet::standard;
    if (s == "simple") return CovariateSet::simple;
    if (s == "squares") return CovariateSet::squares;
    throw Error("unknown covariate set '" + std::string(s) + "' (expected standard, simple or squares)");
}

inline std::string_view to_string(CovariateSet s) {
    switch (s) {
        case CovariateSet::standard: return "standard";
        case CovariateSet::simple: return "simple";
        case CovariateSet::squares: return "squares";
    }
    return "standard";
}

/// NSW treated stacked on PSID-1 controls (N = 2675).
/// simple: the seven untransformed covariates; squares: standard plus
/// age^2, re74^2 and re75^2.
inline Dataset lalonde(const std::filesystem::path& cache_dir, CovariateSet set = CovariateSet::standard, const FetchOptions& opt = {}) {
    const Dataset t = fetch_benchmark("nsw_dw", cache_dir, opt);
    const Dataset c = fetch_benchmark("psid1", cache_dir, opt);
    Dataset ds;
    ds.X.resize(t.n() + c.n(), t.p());
    ds.X << t.X, c.X;
    ds.D = t.D;
    ds.D.insert(ds.D.end(), c.D.begin(), c.D.end());
    Vector y(t.n() + c.n());
    y << *t.Y, *c.Y;
    ds.Y = y;
    ds.column_names = t.column_names;
    switch (set) {
        case CovariateSet::standard: break;
        case CovariateSet::simple:
            ds = detail::reorder(ds, {"age", "education", "re74", "re75", "black", "hispanic", "married"});
            break;
        case CovariateSet::squares: {
            const Index p = ds.p();
            Matrix X(ds.n(), p + 3);
            X.leftCols(p) = ds.X;
            int k = 0;
            for (const char* name : {"age", "re74", "re75"}) {
                X.col(p + k++) = ds.X.col(ds.column_index(name)).array().square();
                ds.column_names.push_back(std::string(name) + "^2");
            }
            ds.X = std::move(X);
            break;
        }
    }
    ds.validate();
    return ds;
}

}  // namespace kbal
