import numpy as np

from homofilter.services.random_streams import RngStream, purpose_code


class TestRngStream:
    def test_same_key_reproduces_sequence(self):
        # Arrange
        stream = RngStream.for_replication(42, 3).child("path")

        # Act
        first = stream.generator().normal(size=5)
        second = RngStream.for_replication(42, 3).child("path").generator().normal(size=5)

        # Assert
        np.testing.assert_array_equal(first, second)

    def test_distinct_keys_give_distinct_sequences(self):
        base = RngStream.for_replication(42, 3)

        draws = [s.generator().normal() for s in (base, base.child("full"), base.child("reduced"), base.child("full", 1))]

        assert len(set(draws)) == 4

    def test_purpose_separates_streams(self):
        a = RngStream.for_replication(7, 0).generator().normal()
        b = RngStream.for_replication(7, 0, purpose="homogenize").generator().normal()

        assert a != b

    def test_purpose_code_is_stable(self):
        assert purpose_code("path") == purpose_code("path")
        assert 0 <= purpose_code("path") < 2 ** 32

    def test_stream_id(self):
        assert RngStream(seed=1).stream_id == "root"
        assert RngStream(seed=1, key=(2, 5)).stream_id == "2.5"
