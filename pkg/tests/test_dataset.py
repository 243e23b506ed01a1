"""Ratings-format parsing, request conversion, curve fits, temporal stability."""

import hashlib
import io
import json
import zipfile

import numpy as np
import pytest

from d2dcache import (
    GENRES,
    EmConfig,
    MovieRecord,
    ParseError,
    RatingRecord,
    TopicCatalog,
    catalog_size_curve,
    fetch_movielens,
    fit_curve,
    genre_catalog,
    load_excerpt,
    parse_movies,
    parse_ratings,
    release_order,
    save_curve,
    save_fits,
    split_by_release,
    temporal_topic_similarity,
    to_request_matrix,
)
from d2dcache.dataset import excerpt_dir, format_movie, format_rating, locate_movielens


class TestParseRatings:
    def test_canonical_line(self):
        records, rejects = parse_ratings(b"1::1193::5::978300760")
        assert records == [RatingRecord(1, 1193, 5, 978300760)]
        assert rejects == []

    def test_file_like_source(self):
        records, _ = parse_ratings(io.BytesIO(b"2::30::4::5000\n3::31::1::6000\n"))
        assert [r.user_id for r in records] == [2, 3]

    def test_blank_lines_skipped(self):
        records, rejects = parse_ratings(b"\n1::2::3::4\n\n")
        assert len(records) == 1 and not rejects

    def test_malformed_line_reported_with_number(self):
        good = "\n".join(f"{u}::1::5::0" for u in range(1, 400))
        data = ("a::b::c::d\n" + good).encode()
        records, rejects = parse_ratings(data)
        assert len(records) == 399
        assert rejects[0][0] == 1
        assert "non-integer" in rejects[0][2]

    @pytest.mark.parametrize("line, reason", [
        (b"1::2::3", "expected 4 fields"),
        (b"0::2::3::4", "positive"),
        (b"1::2::9::4", "rating outside"),
        (b"1::2::3::-1", "negative timestamp"),
    ])
    def test_rejection_reasons(self, line, reason):
        good = ("\n".join(f"{u}::1::5::0" for u in range(1, 400))).encode()
        _, rejects = parse_ratings(line + b"\n" + good)
        assert len(rejects) == 1 and reason in rejects[0][2]

    def test_mostly_malformed_raises(self):
        data = b"junk\nmore junk\n" + "\n".join(
            f"{u}::1::5::0" for u in range(1, 101)).encode()
        with pytest.raises(ParseError, match="corrupt"):
            parse_ratings(data)

    def test_unreadable_source(self):
        with pytest.raises(ParseError, match="unreadable"):
            parse_ratings(12345)


class TestParseMovies:
    def test_canonical_line(self):
        records, rejects = parse_movies(
            "1::Toy Story (1995)::Animation|Children's|Comedy".encode("latin-1"))
        assert not rejects
        movie = records[0]
        assert movie.movie_id == 1
        assert movie.year == 1995
        assert movie.genres == ("Animation", "Children's", "Comedy")

    def test_missing_year_kept(self):
        records, rejects = parse_movies(b"5::Some Film::Drama")
        assert not rejects
        assert records[0].year is None

    def test_unknown_genre_rejected(self):
        good = "\n".join(f"{i}::T ({1990 + i % 10})::Drama" for i in range(1, 400))
        data = ("7::Weird (1999)::Dramedy\n" + good).encode()
        _, rejects = parse_movies(data)
        assert len(rejects) == 1 and "unknown genre" in rejects[0][2]

    @pytest.mark.parametrize("line, reason", [
        (b"1::Only Two Fields", "expected 3 fields"),
        (b"x::Title (1990)::Drama", "non-integer movie id"),
        (b"2::Title (1990)::", "no genres"),
    ])
    def test_rejection_reasons(self, line, reason):
        good = ("\n".join(f"{i}::T ({1990})::Drama" for i in range(1, 400))).encode()
        _, rejects = parse_movies(line + b"\n" + good)
        assert len(rejects) == 1 and reason in rejects[0][2]

    def test_format_round_trips(self):
        rating = RatingRecord(12, 34, 5, 678)
        assert parse_ratings(format_rating(rating).encode())[0][0] == rating
        movie = MovieRecord(9, "Nine Lives (1987)", 1987, ("Comedy", "Drama"))
        assert parse_movies(format_movie(movie).encode())[0][0] == movie


class TestToRequestMatrix:
    def test_single_rating(self):
        matrix, dups = to_request_matrix([RatingRecord(7, 42, 5, 0)])
        assert matrix.K == 1 and matrix.F == 1
        assert matrix.total == 1 and dups == 0
        assert matrix.user_ids == (7,) and matrix.file_ids == (42,)

    def test_duplicate_pair_collapsed(self):
        ratings = [RatingRecord(1, 5, 4, 0), RatingRecord(1, 5, 2, 99),
                   RatingRecord(2, 5, 3, 50)]
        matrix, dups = to_request_matrix(ratings)
        assert dups == 1
        assert matrix.total == 2
        assert matrix.to_dense().tolist() == [[1], [1]]

    def test_universe_filtering(self):
        ratings = [RatingRecord(1, 5, 4, 0), RatingRecord(1, 6, 4, 0)]
        matrix, _ = to_request_matrix(ratings, user_ids=[1], movie_ids=[5])
        assert matrix.total == 1 and matrix.F == 1

    def test_empty_input(self):
        matrix, dups = to_request_matrix([], user_ids=[1, 2], movie_ids=[3])
        assert matrix.total == 0 and dups == 0
        assert matrix.K == 2 and matrix.F == 1


MOVIES = [
    MovieRecord(10, "Oldest (1950)", 1950, ("Drama",)),
    MovieRecord(20, "Mid (1970)", 1970, ("Comedy",)),
    MovieRecord(30, "Newer (1990)", 1990, ("Drama",)),
    MovieRecord(40, "Newest (2000)", 2000, ("Comedy",)),
    MovieRecord(50, "Undated", None, ("Drama",)),
]


class TestReleaseSplit:
    def test_order_puts_missing_years_last(self):
        ordered = release_order(MOVIES)
        assert [m.movie_id for m in ordered] == [10, 20, 30, 40, 50]

    def test_order_breaks_year_ties_by_id(self):
        pair = [MovieRecord(9, "B (1980)", 1980, ("Drama",)),
                MovieRecord(3, "A (1980)", 1980, ("Drama",))]
        assert [m.movie_id for m in release_order(pair)] == [3, 9]

    def test_split_sizes_and_partition(self):
        ratings = [RatingRecord(1, 10, 5, 0), RatingRecord(1, 40, 5, 0),
                   RatingRecord(2, 30, 5, 0), RatingRecord(2, 50, 5, 0)]
        n1, n2 = split_by_release(MOVIES, ratings)
        # five films: first half takes three (10, 20, 30), second two
        assert n1.F == 3 and n2.F == 2
        assert n1.file_ids == (10, 20, 30) and n2.file_ids == (40, 50)
        assert n1.user_ids == n2.user_ids == (1, 2)
        assert n1.total + n2.total == 4

    def test_empty_movie_list_raises(self):
        with pytest.raises(ParseError, match="empty movie list"):
            split_by_release([], [])


class TestCatalogSizeCurve:
    @staticmethod
    def uniform_requests():
        # every user requests exactly two personal films plus one shared one
        rows = []
        K, F = 6, 13
        dense = np.zeros((K, F), dtype=np.int64)
        for k in range(K):
            dense[k, 2 * k] = 1
            dense[k, 2 * k + 1] = 1
            dense[k, 12] = 1
        from d2dcache import RequestMatrix
        return RequestMatrix.from_dense(dense)

    def test_full_population_is_exact(self):
        req = self.uniform_requests()
        for seed in (0, 1):
            means = catalog_size_curve(req, [6], trials=3, seed=seed)
            assert means[0] == 13.0

    def test_single_user_mean_is_exact_for_equal_users(self):
        req = self.uniform_requests()
        means = catalog_size_curve(req, [1], trials=7, seed=5)
        assert means[0] == 3.0

    def test_monotone_in_subset_size(self):
        req = self.uniform_requests()
        means = catalog_size_curve(req, [1, 2, 3, 4, 5, 6], trials=11, seed=2)
        assert (np.diff(means) >= 0).all()
        assert means[-1] == 13.0

    def test_deterministic_per_seed(self):
        req = self.uniform_requests()
        a = catalog_size_curve(req, [1, 3, 6], trials=9, seed=4)
        b = catalog_size_curve(req, [1, 3, 6], trials=9, seed=4)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("counts", [[2, 2], [3, 1], [0, 2], [7]])
    def test_rejects_bad_counts(self, counts):
        req = self.uniform_requests()
        with pytest.raises(ParseError):
            catalog_size_curve(req, counts, trials=2)


class TestFitCurve:
    X = np.arange(1.0, 41.0)

    @pytest.mark.parametrize("family, params, fn", [
        ("zipf", {"a": 2.0, "beta": 1.0}, lambda x: 2.0 * x ** -1.0),
        ("exponential", {"a": 3.0, "b": 0.5}, lambda x: 3.0 * np.exp(-0.5 * x)),
        ("weibull", {"a": 0.05, "b": 1.3},
         lambda x: 0.05 * 1.3 * x ** 0.3 * np.exp(-0.05 * x ** 1.3)),
        ("power", {"a": 1.5, "b": 0.7, "c": 2.0}, lambda x: 1.5 * x ** 0.7 + 2.0),
        ("log", {"a": 2.0, "b": 0.5}, lambda x: 2.0 * np.log(0.5 * x)),
    ])
    def test_planted_recovery(self, family, params, fn):
        fit = fit_curve(self.X, fn(self.X), family)
        assert fit.family == family
        assert not fit.degenerate
        assert fit.r_squared > 0.999
        for name, true in params.items():
            assert fit.params[name] == pytest.approx(true, rel=1e-3), (name, fit.params)

    def test_constant_target_degenerate(self):
        fit = fit_curve(self.X, np.full_like(self.X, 4.0), "zipf")
        assert fit.degenerate
        assert np.isnan(fit.r_squared)

    def test_unknown_family(self):
        with pytest.raises(ParseError, match="unknown fit family"):
            fit_curve(self.X, self.X, "cubic")

    def test_rejects_mismatched_input(self):
        with pytest.raises(ParseError, match="matching"):
            fit_curve([1.0, 2.0], [1.0], "zipf")

    def test_better_family_wins(self):
        # a power law with an offset is fit poorly by a pure logarithm
        y = 1.5 * self.X ** 0.7 + 2.0
        power = fit_curve(self.X, y, "power")
        log = fit_curve(self.X, y, "log")
        assert power.r_squared > log.r_squared


class TestTemporalSimilarity:
    @staticmethod
    def halves(gen, K=6, F=8):
        from d2dcache import RequestMatrix
        dense = gen.integers(0, 4, (K, F))
        dense[:, 0] += 1
        return RequestMatrix.from_dense(dense)

    def test_identical_halves_have_unit_similarity(self, gen):
        n = self.halves(gen)
        result = temporal_topic_similarity(n, n, 3, EmConfig(3, seed=2, tol=1e-8))
        assert result.similarities.size == 6
        assert np.abs(result.similarities - 1.0).max() < 1e-12
        assert result.active_similarity == pytest.approx(1.0, abs=1e-12)
        assert result.excluded_users == 0
        assert result.topic_labels is None

    def test_silent_users_excluded(self, gen):
        from d2dcache import RequestMatrix
        dense = gen.integers(1, 4, (5, 6))
        quiet = dense.copy()
        quiet[2] = 0
        n1 = RequestMatrix.from_dense(dense)
        n2 = RequestMatrix.from_dense(quiet)
        result = temporal_topic_similarity(n1, n2, 2, EmConfig(2, seed=0))
        assert result.excluded_users == 1
        assert 2 not in result.included_users.tolist()
        assert result.similarities.size == 4

    def test_catalog_topics_intersected(self, gen):
        from d2dcache import RequestMatrix
        n1 = RequestMatrix.from_dense(gen.integers(1, 4, (4, 4)))
        n2 = RequestMatrix.from_dense(gen.integers(1, 4, (4, 4)))
        cat1 = TopicCatalog(("a", "b"), ((0, 1, 2, 3), (1, 2)))
        cat2 = TopicCatalog(("a", "b"), ((0, 1, 2, 3), ()))
        result = temporal_topic_similarity(n1, n2, 2, EmConfig(2, seed=0),
                                           catalogs=(cat1, cat2))
        assert result.topic_labels == ("a",)
        assert result.similarities.size == 4
        # one surviving topic makes every preference vector identical
        assert np.abs(result.similarities - 1.0).max() < 1e-12

    def test_no_shared_topic_raises(self, gen):
        from d2dcache import RequestMatrix
        n1 = RequestMatrix.from_dense(gen.integers(1, 4, (3, 4)))
        n2 = RequestMatrix.from_dense(gen.integers(1, 4, (3, 4)))
        cat1 = TopicCatalog(("a", "b"), ((0, 1, 2, 3), ()))
        cat2 = TopicCatalog(("a", "b"), ((), (0, 1, 2, 3)))
        with pytest.raises(ParseError, match="both halves"):
            temporal_topic_similarity(n1, n2, 2, EmConfig(2, seed=0),
                                      catalogs=(cat1, cat2))

    def test_user_universe_mismatch(self, gen):
        from d2dcache import RequestMatrix
        n1 = RequestMatrix.from_dense(gen.integers(1, 3, (3, 4)))
        n2 = RequestMatrix.from_dense(gen.integers(1, 3, (4, 4)))
        with pytest.raises(ParseError, match="user universe"):
            temporal_topic_similarity(n1, n2, 2)

    def test_mismatched_catalog_labels(self, gen):
        from d2dcache import RequestMatrix
        n = RequestMatrix.from_dense(gen.integers(1, 3, (3, 4)))
        cat1 = TopicCatalog(("a", "b"), ((0, 1), (2, 3)))
        cat2 = TopicCatalog(("b", "a"), ((0, 1), (2, 3)))
        with pytest.raises(ParseError, match="same topics"):
            temporal_topic_similarity(n, n, 2, catalogs=(cat1, cat2))

    def test_fraction_above_and_cdf(self):
        from d2dcache.dataset import TemporalSimilarity
        sims = np.array([0.5, 0.9, 0.95, 0.7])
        ts = TemporalSimilarity(sims, np.arange(4), 0, 1.0)
        assert ts.fraction_above(0.8) == 0.5
        values, fractions = ts.cdf()
        assert np.array_equal(values, np.sort(sims))
        assert fractions[-1] == 1.0


class TestGenreCatalog:
    def test_membership_columns(self):
        movies = [MovieRecord(10, "A (1990)", 1990, ("Drama", "Comedy")),
                  MovieRecord(20, "B (1991)", 1991, ("Drama",)),
                  MovieRecord(30, "C (1992)", 1992, ("Western",))]
        cat = genre_catalog(movies, [10, 20])
        assert cat.labels == GENRES
        drama = cat.members[GENRES.index("Drama")]
        comedy = cat.members[GENRES.index("Comedy")]
        western = cat.members[GENRES.index("Western")]
        assert drama == (0, 1)
        assert comedy == (0,)
        assert western == ()


class TestFetch:
    @staticmethod
    def make_archive(tmp_path):
        payload = tmp_path / "payload"
        payload.mkdir()
        archive = tmp_path / "ml-1m.zip"
        with zipfile.ZipFile(archive, "w") as z:
            z.writestr("ml-1m/ratings.dat", "1::1::5::0\n")
            z.writestr("ml-1m/movies.dat", "1::T (1990)::Drama\n")
        return archive, hashlib.md5(archive.read_bytes()).hexdigest()

    def test_fetch_extract_and_reuse(self, tmp_path):
        archive, digest = self.make_archive(tmp_path)
        dest = tmp_path / "dest"
        data_dir = fetch_movielens(dest, url=archive.as_uri(), checksum=digest)
        assert (data_dir / "ratings.dat").read_text() == "1::1::5::0\n"
        # second call short-circuits on the extracted data
        again = fetch_movielens(dest, url="file:///nonexistent", checksum=None)
        assert again == data_dir

    def test_checksum_mismatch(self, tmp_path):
        archive, _ = self.make_archive(tmp_path)
        with pytest.raises(ParseError, match="checksum"):
            fetch_movielens(tmp_path / "dest2", url=archive.as_uri(),
                            checksum="0" * 32)


class TestExcerpt:
    def test_loads_cleanly(self):
        ratings, movies = load_excerpt()
        assert len({r.user_id for r in ratings}) == 50
        assert len(movies) == 200
        matrix, dups = to_request_matrix(ratings)
        assert dups == 0
        assert matrix.total == len(ratings)
        years = [m.year for m in movies]
        assert all(y is not None and 1930 <= y <= 2000 for y in years)

    def test_excerpt_dir_contents(self):
        d = excerpt_dir()
        assert (d / "ratings.dat").exists()
        assert (d / "movies.dat").exists()


class TestLocate:
    def test_env_var_wins(self, tmp_path, monkeypatch):
        target = tmp_path / "ml-1m"
        target.mkdir()
        (target / "ratings.dat").write_text("1::1::5::0\n")
        monkeypatch.setenv("MOVIELENS_1M_DIR", str(target))
        assert locate_movielens() == target

    def test_absent_everywhere(self, tmp_path, monkeypatch):
        monkeypatch.delenv("MOVIELENS_1M_DIR", raising=False)
        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("HOME", str(tmp_path))
        assert locate_movielens() is None


class TestSaveHelpers:
    def test_curve_file(self, tmp_path):
        path = save_curve([1, 5], [2.0, 7.5], tmp_path / "curve.csv")
        assert path.read_text() == "users,mean_distinct_files\n1,2.0\n5,7.5\n"

    def test_fits_file(self, tmp_path):
        fits = [fit_curve(np.arange(1.0, 20.0), 2.0 * np.arange(1.0, 20.0) ** -1.0,
                          "zipf")]
        path = save_fits(fits, tmp_path / "fits.json")
        payload = json.loads(path.read_text())
        assert payload[0]["family"] == "zipf"
        assert payload[0]["r_squared"] > 0.999
