use dwmr_ndcore::checkpoint::{read_arrays, write_arrays, ArrayData, NamedArray};
use proptest::prelude::*;

fn array_strategy() -> impl Strategy<Value = NamedArray> {
    (
        "[a-z._]{1,12}",
        prop::collection::vec(1u32..4, 0..4),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(name, dims, wide, seed)| {
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let vals = (0..n).map(|i| ((seed as f64) * 1e-9 + i as f64).sin() * 1e3);
            let data = if wide {
                ArrayData::F64(vals.collect())
            } else {
                ArrayData::F32(vals.map(|v| v as f32).collect())
            };
            NamedArray { name, dims, data }
        })
}

proptest! {
    #[test]
    fn write_read_write_is_byte_identical(arrays in prop::collection::vec(array_strategy(), 0..6)) {
        let mut first = Vec::new();
        write_arrays(&mut first, &arrays).unwrap();
        let back = read_arrays(&first[..]).unwrap();
        prop_assert_eq!(&back, &arrays);
        let mut second = Vec::new();
        write_arrays(&mut second, &back).unwrap();
        prop_assert_eq!(first, second);
    }
}
