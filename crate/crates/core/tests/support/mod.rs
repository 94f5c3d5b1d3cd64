pub mod toy_group;
