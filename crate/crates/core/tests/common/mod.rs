#![allow(dead_code)]

pub mod dcsd_oracle;
pub mod gradient;
pub mod metric_oracle;
