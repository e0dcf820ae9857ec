/// Registers plain `pub fn` cases twice: as libtest tests, and as a `CASES`
/// table the acceptance summary calls directly.
macro_rules! cases {
    ($($name:ident),* $(,)?) => {
        pub const CASES: &[(&str, fn())] = &[$((stringify!($name), $name as fn())),*];

        #[cfg(test)]
        mod harness {
            $(#[test]
            fn $name() {
                super::$name()
            })*
        }
    };
}
