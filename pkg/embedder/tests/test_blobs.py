import numpy as np

from semfield_embedder.blobs import (PALETTE, find_blobs, nearest_color_name,
                                     shape_of)


def canvas(color=(240, 240, 240), size=(48, 48)):
    return np.full(size + (3,), color, dtype=np.uint8)


class TestNearestColorName:
    def test_exact_palette_values(self):
        for name, rgb in PALETTE.items():
            assert nearest_color_name(rgb) == name

    def test_nearby_value_snaps(self):
        assert nearest_color_name((150, 100, 60)) == "brown"
        assert nearest_color_name((10, 10, 10)) == "black"


class TestShapeOf:
    def test_bands(self):
        assert shape_of((0, 0, 40, 20)) == "tall"
        assert shape_of((0, 0, 20, 40)) == "wide"
        assert shape_of((0, 0, 30, 30)) == "square"
        # 4:3 is below the 1.33 cutoff only by the strict inequality
        assert shape_of((0, 0, 40, 30)) == "tall"
        assert shape_of((0, 0, 39, 30)) == "square"


class TestFindBlobs:
    def test_single_rectangle(self):
        rgb = canvas()
        rgb[10:30, 5:15] = (200, 40, 40)
        blobs = find_blobs(rgb)
        assert len(blobs) == 1
        blob = blobs[0]
        assert blob.bbox == (10, 5, 30, 15)
        assert blob.area == 200
        assert blob.fill == 1.0
        np.testing.assert_allclose(blob.mean_color, (200.0, 40.0, 40.0))
        expected = np.zeros((48, 48), dtype=bool)
        expected[10:30, 5:15] = True
        np.testing.assert_array_equal(blob.mask, expected)

    def test_two_blobs_sorted_by_area(self):
        rgb = canvas()
        rgb[2:6, 2:6] = (40, 70, 200)  # 16 px
        rgb[20:40, 20:40] = (40, 170, 60)  # 400 px
        blobs = find_blobs(rgb, min_area=1)
        assert [b.area for b in blobs] == [400, 16]

    def test_min_area_filters(self):
        rgb = canvas()
        rgb[2:6, 2:6] = (40, 70, 200)
        rgb[20:40, 20:40] = (40, 170, 60)
        assert [b.area for b in find_blobs(rgb, min_area=64)] == [400]

    def test_l_shape_fill(self):
        rgb = canvas(size=(64, 64))
        rgb[8:40, 10:18] = (140, 95, 50)
        rgb[32:40, 10:26] = (140, 95, 50)
        blob, = find_blobs(rgb)
        assert blob.bbox == (8, 10, 40, 26)
        assert blob.area == 32 * 8 + 8 * 8
        assert blob.fill == 320 / 512

    def test_diagonal_touch_is_two_components(self):
        # 4-connectivity: corner contact does not merge
        rgb = canvas()
        rgb[10:20, 10:20] = (200, 40, 40)
        rgb[20:30, 20:30] = (200, 40, 40)
        assert len(find_blobs(rgb, min_area=1)) == 2

    def test_edge_touch_is_one_component(self):
        rgb = canvas()
        rgb[10:20, 10:20] = (200, 40, 40)
        rgb[20:30, 10:20] = (200, 40, 40)
        blob, = find_blobs(rgb, min_area=1)
        assert blob.area == 200

    def test_background_from_border(self):
        # interior majority color is not the background; the border is
        rgb = canvas(color=(25, 25, 25))
        rgb[4:44, 4:44] = (240, 240, 240)
        rgb[10:20, 10:20] = (25, 25, 25)
        blobs = find_blobs(rgb, min_area=1)
        # the big white slab is salient against the dark border, and the
        # dark hole inside it is background again
        assert blobs[0].area == 40 * 40 - 10 * 10

    def test_uniform_image_has_no_blobs(self):
        assert find_blobs(canvas()) == []

    def test_within_tolerance_is_background(self):
        rgb = canvas()
        rgb[10:20, 10:20] = (210, 210, 210)  # only 30 away from 240
        assert find_blobs(rgb) == []
