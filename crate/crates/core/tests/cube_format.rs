use specret_core::cube::{flatten, sample_pixel_sets, unflatten, HsiCube, CUBE_MAGIC};
use specret_core::spectra::WavelengthGrid;

fn tiny() -> HsiCube {
    let data: Vec<f32> = (0..2 * 2 * 3).map(|v| v as f32 * 1.5 + 0.25).collect();
    HsiCube::new(
        "t",
        2,
        2,
        WavelengthGrid::uniform(3, 8.0, 12.0).unwrap(),
        data,
    )
    .unwrap()
}

#[test]
fn flatten_is_row_major() {
    let c = tiny();
    let m = flatten(&c);
    assert_eq!(m.len(), 4);
    assert_eq!(m[0], vec![0.25, 1.75, 3.25]);
    assert_eq!(m[1], vec![4.75, 6.25, 7.75]);
    assert_eq!(m[3][2], 11.0 * 1.5 + 0.25);
    let back = unflatten("t", 2, 2, c.grid().clone(), &m).unwrap();
    assert_eq!(back.raw(), c.raw());
}

#[test]
fn header_layout_and_bit_exact_round_trip() {
    let c = tiny();
    let bytes = c.to_bytes();
    assert_eq!(&bytes[..4], CUBE_MAGIC);
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 3);
    assert_eq!(f64::from_le_bytes(bytes[18..26].try_into().unwrap()), 8.0);
    assert_eq!(f64::from_le_bytes(bytes[26..34].try_into().unwrap()), 12.0);
    assert_eq!(bytes.len(), 34 + 12 * 4);
    let back = HsiCube::read_from("t", &bytes[..]).unwrap();
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.hsic");
    c.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(HsiCube::load(&p).unwrap().raw(), c.raw());
}

#[test]
fn corrupt_headers_rejected() {
    let mut bytes = tiny().to_bytes();
    bytes[0] = b'X';
    assert!(HsiCube::read_from("t", &bytes[..]).is_err());
    let mut bytes = tiny().to_bytes();
    bytes[4] = 9;
    assert!(HsiCube::read_from("t", &bytes[..]).is_err());
    let bytes = tiny().to_bytes();
    assert!(HsiCube::read_from("t", &bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn pixel_sets() {
    let grid = WavelengthGrid::lwir(4).unwrap();
    let big = HsiCube::new("b", 128, 128, grid.clone(), vec![1.0; 128 * 128 * 4]).unwrap();
    let sets = sample_pixel_sets(&big, 200, 3, 9).unwrap();
    assert_eq!(sets.len(), 3);
    for s in &sets {
        let mut idx = s.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 200);
    }
    assert_eq!(sets, sample_pixel_sets(&big, 200, 3, 9).unwrap());

    let small = tiny();
    let all = sample_pixel_sets(&small, 4, 1, 0).unwrap();
    let mut idx: Vec<usize> = all[0].indices.iter().map(|&(r, c)| r * 2 + c).collect();
    idx.sort_unstable();
    assert_eq!(idx, vec![0, 1, 2, 3]);
    for (k, &(r, c)) in all[0].indices.iter().enumerate() {
        assert_eq!(all[0].spectra[k], small.pixel_at(r, c));
    }
    assert!(sample_pixel_sets(&small, 5, 1, 0).is_err());
}
